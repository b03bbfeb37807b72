"""Command-line entry point.

Pipeline stages share one output root; each writes ``<out>/<stage>/`` with a
single ``manifest.json``. ``score`` and ``embed`` write one file at ``--out``
plus ``<file>.manifest.json`` beside it.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import align, evalkit, grounding, policy, synthenv
from .config import STAGES, RunConfig, load_config
from .errors import ConfigError, ContractError
from .text import Tokenizer

log = logging.getLogger("gpla")

FORMAT_VERSION = 1
THREADS_ENV = "GPLA_NUM_THREADS"
PRODUCER = {
    "gen/train": "gen", "gen/val": "gen", "gen/test": "gen",
    "train-grounding/grounding.ckpt": "train-grounding",
    "train-sup/lm.ckpt": "train-sup", "train-sup/decoder.ckpt": "train-sup",
    "gpla-train/lm.ckpt": "gpla-train",
}


class PrerequisiteError(RuntimeError):
    pass


@dataclass
class RunManifest:
    stage: str
    config_hash: str
    seed: int
    format_version: int = FORMAT_VERSION
    wall_clock_s: float = 0.0
    artifacts: dict = field(default_factory=dict)
    parents: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _checksums(paths: list[Path], base: Path) -> dict:
    out = {}
    for p in paths:
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in files:
            out[str(q.relative_to(base))] = sha256_file(q)
    return out


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@contextlib.contextmanager
def stage_lock(directory: Path):
    """Exclusive lock on an output directory for the duration of one stage."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _require(root: Path, rel: str) -> Path:
    path = root / rel
    if not path.exists():
        raise PrerequisiteError(f"missing {path}; run the `{PRODUCER.get(rel, rel.split('/')[0])}` "
                                f"stage with --out {root} first")
    return path


def _parent_hash(root: Path, stage: str) -> str | None:
    mf = root / stage / "manifest.json"
    if not mf.exists():
        return None
    return json.loads(mf.read_text())["config_hash"]


def _samples(root: Path, split: str, cfg: RunConfig) -> synthenv.SampleSet:
    episodes = synthenv.load_dataset(_require(root, f"gen/{split}"))
    return synthenv.SampleSet.from_episodes(episodes, cfg.data.idle_threshold,
                                            cfg.grounding.horizon, cfg.data.image_size)


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# stages; each returns (artifact paths, parent stages, summary)


def stage_gen(cfg: RunConfig, root: Path, out: Path, args):
    episodes = synthenv.generate_dataset(cfg.data.n_episodes, cfg.stream("data"), cfg.data.families)
    splits = synthenv.split_episodes(episodes, cfg.data.fractions, cfg.stream("split"))
    paths, summary = [], {}
    for name, eps in zip(("train", "val", "test"), splits):
        synthenv.save_dataset(eps, out / name, {"split": name, "seed": cfg.seed},
                              cfg.data.image_size)
        paths.append(out / name)
        summary[f"{name}_episodes"] = len(eps)
    return paths, [], summary


def stage_train_grounding(cfg: RunConfig, root: Path, out: Path, args):
    train = _samples(root, "train", cfg)
    tok = Tokenizer()
    model = grounding.GroundingModel(cfg.grounding, tok, seed=cfg.stream("init/grounding"))
    tcfg = dataclasses.replace(cfg.grounding_train, seed=cfg.stream("sampling/grounding"))
    ckpt = out / "grounding.ckpt"
    history = grounding.train_grounding(model, train, tcfg, checkpoint_path=ckpt)
    grounding.save_grounding(model, ckpt, meta={"seed": cfg.seed})
    _write_rows(out / "train_log.csv", list(history.rows[0]) if history.rows else ["step"],
                [[repr(v) if isinstance(v, float) else v for v in r.values()] for r in history.rows])
    val = _samples(root, "val", cfg)
    summary = {}
    if len(set(val.low_level)) >= 2:
        summary = grounding.evaluate_retrieval(model, val, min(64, len(set(val.low_level))),
                                               seed=cfg.stream("eval"))
    (out / "retrieval.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return [ckpt, out / "train_log.csv", out / "retrieval.json"], ["gen"], summary


def stage_train_sup(cfg: RunConfig, root: Path, out: Path, args):
    train = _samples(root, "train", cfg)
    tok = Tokenizer()
    lm = policy.HighLevelLM(cfg.lm, tok, seed=cfg.stream("init/lm"))
    dec = policy.LowLevelDecoder(cfg.decoder, tok, seed=cfg.stream("init/decoder"))
    scfg = dataclasses.replace(cfg.sup, seed=cfg.stream("sampling/sup"))

    def emergency(kind, module):
        policy.save_module(module, kind, out / f"{kind}.ckpt", meta={"seed": cfg.seed, "aborted": True})

    history = policy.train_supervised(lm, dec, train, scfg, checkpoint=emergency)
    policy.save_module(lm, "lm", out / "lm.ckpt", meta={"seed": cfg.seed})
    policy.save_module(dec, "decoder", out / "decoder.ckpt", meta={"seed": cfg.seed})
    rows = [("lm", r["step"], repr(r["loss"])) for r in history.lm]
    rows += [("decoder", r["step"], repr(r["loss"])) for r in history.dec]
    _write_rows(out / "train_log.csv", ["model", "step", "loss"], rows)
    summary = {"lm_final_loss": history.lm[-1]["loss"] if history.lm else None,
               "decoder_final_loss": history.dec[-1]["loss"] if history.dec else None}
    return [out / "lm.ckpt", out / "decoder.ckpt", out / "train_log.csv"], ["gen"], summary


def _load_policy(root: Path, lm_stage: str) -> policy.Policy:
    lm = policy.load_module(_require(root, f"{lm_stage}/lm.ckpt"), "lm")
    dec = policy.load_module(_require(root, "train-sup/decoder.ckpt"), "decoder")
    return policy.Policy(lm, dec)


def stage_gpla_train(cfg: RunConfig, root: Path, out: Path, args):
    g = grounding.load_grounding(_require(root, "train-grounding/grounding.ckpt"))
    pol = _load_policy(root, "train-sup")
    train = _samples(root, "train", cfg)
    gcfg = dataclasses.replace(cfg.gpla, seed=cfg.stream("sampling/gpla"))
    pairs = out / "pairs.jsonl" if args.dump_pairs else None
    history = align.gpla_train(pol, g, train, gcfg, log_path=out / "gpla_log.csv", pairs_path=pairs)
    policy.save_module(pol.lm, "lm", out / "lm.ckpt", meta={"seed": cfg.seed})
    paths = [out / "lm.ckpt", out / "gpla_log.csv"] + ([pairs] if pairs else [])
    used = sum(r["pairs_used"] for r in history.rows)
    return paths, ["gen", "train-grounding", "train-sup"], {"pairs_used": used, "steps": len(history.rows)}


def _rollout_rows(pol: policy.Policy, samples: synthenv.SampleSet, batch: int = 256):
    rows = []
    for s in range(0, len(samples), batch):
        idx = np.arange(s, min(s + batch, len(samples)))
        hl = [samples.high_level[i] for i in idx]
        groups = policy.generate_candidates_batch(pol, hl, samples.float_images(idx),
                                                  samples.effector[idx], 1, greedy=True)
        for k, i in enumerate(idx):
            c = groups[k][0]
            rows.append(evalkit.RolloutRow(int(samples.episode_id[i]), int(samples.step[i]), hl[k],
                                           c.low_level, c.chunk.deltas, samples.low_level[i],
                                           samples.chunks[i]))
    return rows


def stage_rollout(cfg: RunConfig, root: Path, out: Path, args):
    samples = _samples(root, cfg.rollout.split, cfg)
    if cfg.rollout.max_samples:
        samples = samples.subset(np.arange(min(cfg.rollout.max_samples, len(samples))))
    variants = [("sup", "train-sup")]
    if (root / "gpla-train" / "lm.ckpt").exists():
        variants.append(("gpla", "gpla-train"))
    paths = []
    for name, stage in variants:
        pol = _load_policy(root, stage)
        path = out / f"{name}.jsonl"
        evalkit.write_rollouts(_rollout_rows(pol, samples), path)
        paths.append(path)
    return paths, ["gen"] + [s for _, s in variants], {"variants": [v for v, _ in variants],
                                             "rows": len(samples)}


def stage_eval(cfg: RunConfig, root: Path, out: Path, args):
    g = grounding.load_grounding(_require(root, "train-grounding/grounding.ckpt"))
    samples = _samples(root, cfg.rollout.split, cfg)
    rdir = _require(root, "rollout")
    reports = []
    for name in ("sup", "gpla"):
        path = rdir / f"{name}.jsonl"
        if path.exists():
            reports.append(evalkit.evaluate_run(path, g, samples, model=name))
    if not reports:
        raise PrerequisiteError(f"no rollout files in {rdir}; run the `rollout` stage first")
    evalkit.write_report(reports, out / "report.csv")
    return [out / "report.csv"], ["gen", "rollout", "train-grounding"], {
        r.model: {"bleu": r.values["bleu"], "mse": r.values["mse"],
                  "ground_score": r.values["ground_score"]} for r in reports}


def _dataset_samples(path: Path, cfg: RunConfig) -> synthenv.SampleSet:
    episodes = synthenv.load_dataset(path)
    return synthenv.SampleSet.from_episodes(episodes, cfg.data.idle_threshold,
                                            cfg.grounding.horizon, cfg.data.image_size)


def _sample_id(samples, i) -> str:
    return f"{int(samples.episode_id[i])}:{int(samples.step[i])}"


def stage_score(cfg: RunConfig, root: Path, out: Path, args):
    g = grounding.load_grounding(args.model)
    samples = _dataset_samples(Path(args.dataset), cfg)
    scores = g.score_batch(samples.float_images(), samples.effector, samples.chunks,
                           samples.low_level)
    _write_rows(out, ["sample_id", "score"],
                [(_sample_id(samples, i), repr(float(s))) for i, s in enumerate(scores)])
    return [out], [], {"n": len(samples), "mean_score": float(np.mean(scores)) if len(scores) else None}


def stage_embed(cfg: RunConfig, root: Path, out: Path, args):
    from . import tensorcore as T
    g = grounding.load_grounding(args.model)
    samples = _dataset_samples(Path(args.dataset), cfg)
    with open(out, "w") as f, T.no_grad():
        for s in range(0, len(samples), 256):
            idx = np.arange(s, min(s + 256, len(samples)))
            va = g.encode_va_batch(samples.float_images(idx), samples.effector[idx],
                                   samples.chunks[idx]).data
            tx = g.encode_text_batch([samples.low_level[i] for i in idx]).data
            for k, i in enumerate(idx):
                sid = _sample_id(samples, i)
                f.write(json.dumps({"id": sid, "modality": "va",
                                    "vector": va[k].astype(float).tolist()}) + "\n")
                f.write(json.dumps({"id": sid, "modality": "text",
                                    "vector": tx[k].astype(float).tolist()}) + "\n")
    return [out], [], {"n": len(samples)}


STAGE_FUNCS = {
    "gen": stage_gen, "train-grounding": stage_train_grounding, "train-sup": stage_train_sup,
    "gpla-train": stage_gpla_train, "rollout": stage_rollout, "eval": stage_eval,
    "score": stage_score, "embed": stage_embed,
}


def run_stage(stage: str, cfg: RunConfig, out, args=None) -> RunManifest:
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    args = args or argparse.Namespace(dump_pairs=False, model=None, dataset=None)
    out = Path(out)
    file_stage = stage in ("score", "embed")
    if file_stage:
        if not args.model or not args.dataset:
            raise ConfigError(f"`{stage}` needs --model and --dataset")
        root, target, lock_dir = out.parent, out, out.parent
        manifest_path = out.with_name(out.name + ".manifest.json")
    else:
        root, target, lock_dir = out, out / stage, out / stage
        manifest_path = target / "manifest.json"
    start = time.perf_counter()
    with stage_lock(lock_dir):
        paths, parents, summary = STAGE_FUNCS[stage](cfg, root, target, args)
        manifest = RunManifest(stage=stage, config_hash=cfg.hash(), seed=cfg.seed,
                               wall_clock_s=round(time.perf_counter() - start, 3),
                               artifacts=_checksums(paths, lock_dir),
                               parents={p: _parent_hash(root, p) for p in parents},
                               summary=summary)
        _atomic_write(manifest_path, json.dumps(manifest.to_json(), sort_keys=True, indent=1,
                                                default=float))
    return manifest


def _limit_threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    try:
        count = int(n)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {n!r}") from None
    if count < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {count}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=count)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpla", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage)
        p.add_argument("--config", type=Path, default=None, help="TOML config (defaults if omitted)")
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
        p.add_argument("--out", type=Path, required=True,
                       help="output file" if stage in ("score", "embed") else "run root directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if stage in ("score", "embed"):
            p.add_argument("--model", type=Path, required=True, help="grounding checkpoint")
            p.add_argument("--dataset", type=Path, required=True, help="dataset directory")
        if stage == "gpla-train":
            p.add_argument("--dump-pairs", action="store_true", help="write pairs.jsonl")
        if stage == "gen":
            p.add_argument("--task-family", action="append", default=None, dest="task_family",
                           help="restrict generation to this family (repeatable)")
            p.add_argument("--episodes", type=int, default=None, help="number of episodes")
    return parser


def _apply_gen_overrides(cfg: RunConfig, args):
    families = getattr(args, "task_family", None)
    episodes = getattr(args, "episodes", None)
    if families is None and episodes is None:
        return
    data = cfg.data
    try:
        cfg.data = dataclasses.replace(
            data, families=tuple(families) if families else data.families,
            n_episodes=data.n_episodes if episodes is None else episodes)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for name in ("dump_pairs", "model", "dataset"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        limiter = _limit_threads()
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg.seed = args.seed
        _apply_gen_overrides(cfg, args)
        manifest = run_stage(args.stage, cfg, args.out, args)
        if limiter is not None:
            limiter.restore_original_limits()
    except (ConfigError, ContractError, PrerequisiteError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps({"stage": manifest.stage, "config_hash": manifest.config_hash,
                      "artifacts": len(manifest.artifacts)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
