"""End-to-end stages driven by a RunConfig: ingest, train, evaluate,
recommend and the two sweeps. Every stage writes under ``cfg.out_dir``."""
from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from . import data as D
from .adversarial import Schedule, TrainerState, TrainingData, init_trainer, pretrain_pairwise, train_adversarial
from .config import RunConfig
from .errors import ConfigError, DataError
from .evaluation import (EvalTargets, build_targets, candidate_sweep, evaluate, full_ranking,
                         validation_metrics)
from .metrics import MetricReport, build_report, reports_to_csv
from .mf import FactorStore, mf_top_candidates, mf_train
from .mixture import MixtureScorer, ScorerConfig
from .nn import CheckpointError, OptimizerConfig, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

MF_CKPT = "mf.ckpt"
PRETRAIN_CKPT = "pretrain.ckpt"
TRAINER_CKPT = "trainer.ckpt"
MODEL_CKPT = "model.ckpt"
CURVE_CSV = "learning_curve.csv"


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent, reproducible stream per pipeline stage."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(stage.encode("utf-8"))])
    return np.random.Generator(np.random.PCG64(ss))


def out_path(cfg: RunConfig, name: str) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p / name


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


# --- data preparation ---------------------------------------------------------------

@dataclass(eq=False)
class Prepared:
    cfg: RunConfig
    dataset: D.RatingDataset
    split: D.Split
    sessions: D.SessionizedDataset
    data: TrainingData
    content: Optional[D.ContentFeatures]
    validation: EvalTargets
    test: EvalTargets

    @property
    def content_matrix(self) -> Optional[np.ndarray]:
        return None if self.content is None else self.content.matrix


def load_dataset(cfg: RunConfig) -> D.RatingDataset:
    path = Path(cfg.data_path)
    if not path.is_file():
        raise FileNotFoundError(f"rating file not found: {path}")
    parse = D.parse_movielens if cfg.data_format == "movielens" else D.parse_netflix
    return D.label_feedback(parse(path), cfg.feedback)


def split_spec(cfg: RunConfig, ds: D.RatingDataset) -> D.SplitSpec:
    return D.SplitSpec(D.resolve_time(cfg.train_end, ds), D.resolve_time(cfg.test_end, ds),
                       cfg.validation_fraction, cfg.session_days)


def prepare(cfg: RunConfig) -> Prepared:
    ds = load_dataset(cfg)
    split = D.time_split(ds, split_spec(cfg, ds), cfg.split_seed)
    sessions = D.sessionize(split.train, cfg.session_days)
    content = None
    if cfg.content_path:
        cpath = Path(cfg.content_path)
        if not cpath.is_file():
            raise FileNotFoundError(f"content feature file not found: {cpath}")
        content = D.load_content_features(cpath, ds)
    data = TrainingData.from_sessions(sessions, None if content is None else content.matrix)
    T = sessions.num_sessions
    return Prepared(cfg, ds, split, sessions, data, content,
                    build_targets(split.validation, split.train, T), build_targets(split.test, split.train, T))


def scorer_config(cfg: RunConfig, content_dim: int) -> ScorerConfig:
    return ScorerConfig(variant=cfg.mixture, hidden=cfg.hidden, input_dim=cfg.input_dim, content_dim=content_dim,
                        attention_hidden=cfg.attention_hidden, attention_pool_size=cfg.attention_pool_size,
                        init_range=cfg.init_range, identity_init_map=cfg.identity_init_map)


# --- ingest ---------------------------------------------------------------------------

def ingest(cfg: RunConfig) -> Dict[str, object]:
    prep = prepare(cfg)
    stats = D.dataset_stats(prep.dataset, prep.split)
    stats["sessions"] = prep.sessions.num_sessions
    stats["session_days"] = cfg.session_days
    stats["validation_users"] = len(prep.validation)
    stats["test_users"] = len(prep.test)
    stats.update({f"events_{k}": v for k, v in prep.split.summary().items()})
    D.write_split_manifest(prep.dataset, prep.split, out_path(cfg, "split_manifest.tsv"))
    lines = [f"{k}\t{v}" for k, v in stats.items()]
    _write(out_path(cfg, "dataset_stats.tsv"), "\n".join(lines + [f"config_hash\t{cfg.hash}"]) + "\n")
    sess = ["session\tstart\tuser_events\tusers\tmovies"]
    for t, mat in enumerate(prep.sessions.user_sessions):
        start = prep.sessions.start + t * prep.sessions.session_seconds
        sess.append(f"{t}\t{start}\t{mat.nnz}\t{int((np.diff(mat.indptr) > 0).sum())}\t"
                    f"{int((np.diff(prep.sessions.movie_sessions[t].indptr) > 0).sum())}")
    _write(out_path(cfg, "sessions.tsv"), "\n".join(sess) + "\n")
    _write(out_path(cfg, "config.txt"), cfg.dump())
    return stats


def format_stats(stats: Dict[str, object]) -> str:
    head = ["users", "movies", "ratings", "sparsity", "density", "sessions"]
    row = []
    for k in head:
        v = stats.get(k, "")
        row.append(f"{v:.4g}" if isinstance(v, float) else str(v))
    return "\t".join(head) + "\n" + "\t".join(row)


# --- training ---------------------------------------------------------------------------

@dataclass
class TrainOutcome:
    factors: FactorStore
    state: TrainerState
    mf_objective: List[float]
    pretrain_history: List[float]


def schedule(cfg: RunConfig) -> Schedule:
    return Schedule(epochs=cfg.gan_epochs, g_steps=cfg.g_steps, d_steps=cfg.d_steps, batch_size=cfg.batch_size,
                    samples=cfg.samples, margin=cfg.margin,
                    optimizer=OptimizerConfig(cfg.learning_rate, cfg.clip, cfg.l2_lambda), truncate=cfg.truncate)


def generator_candidates(cfg: RunConfig, fs: FactorStore):
    if cfg.generator_candidates == "all":
        return None
    none = np.zeros(0, dtype=np.int64)
    return [mf_top_candidates(fs, u, none, cfg.candidate_n).movies for u in range(fs.num_users)]


def _meta(cfg: RunConfig, prep: Prepared, **extra) -> dict:
    meta = {"config_hash": cfg.hash, "num_users": prep.dataset.num_users, "num_movies": prep.dataset.num_movies}
    meta.update(extra)
    return meta


def train(cfg: RunConfig, prep: Optional[Prepared] = None, resume: bool = False,
          stop_after: Optional[int] = None) -> TrainOutcome:
    """MF pretraining, pairwise pretraining of the mixture scorer, then the
    adversarial phase. ``resume`` continues from the last per-epoch checkpoint."""
    prep = prepare(cfg) if prep is None else prep
    content_dim = 0 if prep.content is None else prep.content.dim
    sched = schedule(cfg)
    trainer_path = out_path(cfg, TRAINER_CKPT)
    mf_hist: List[float] = []
    pre_hist: List[float] = []
    if resume and trainer_path.exists():
        tensors, meta = load_checkpoint(out_path(cfg, MF_CKPT))
        _check_meta(meta, cfg, prep)
        fs = FactorStore.from_tensors(tensors)
        state = TrainerState.load(trainer_path)
        log.info("resuming adversarial training after epoch %d", state.epoch)
    else:
        mf_cfg = OptimizerConfig(cfg.mf_learning_rate, cfg.clip, cfg.l2_lambda)
        res = mf_train(prep.split.train, cfg.factor_dim, mf_cfg, cfg.mf_epochs, stage_rng(cfg.seed, "mf"),
                       batch_size=cfg.batch_size, init_range=cfg.init_range)
        fs, mf_hist = res.factors, res.objective
        save_checkpoint(out_path(cfg, MF_CKPT), fs.to_tensors(), _meta(cfg, prep, objective=mf_hist))
        scorer = MixtureScorer.create(scorer_config(cfg, content_dim), fs, stage_rng(cfg.seed, "init"))
        pre_cfg = OptimizerConfig(cfg.pretrain_learning_rate, cfg.clip, cfg.l2_lambda)
        pre_hist = pretrain_pairwise(scorer, prep.data, cfg.pretrain_epochs, pre_cfg, stage_rng(cfg.seed, "pretrain"),
                                     cfg.batch_size, cfg.margin, cfg.truncate)
        # the discriminator starts from the same scorer and may get extra epochs
        disc = scorer.copy()
        d_hist = pretrain_pairwise(disc, prep.data, cfg.d_pretrain_epochs, pre_cfg,
                                   stage_rng(cfg.seed, "pretrain-d"), cfg.batch_size, cfg.margin, cfg.truncate)
        pre_hist = pre_hist + d_hist
        tensors = scorer.to_tensors("G.")
        tensors.update(disc.to_tensors("D."))
        save_checkpoint(out_path(cfg, PRETRAIN_CKPT), tensors,
                        _meta(cfg, prep, history=pre_hist, scorer=asdict(scorer.cfg)))
        validate = validation_metrics(fs, prep.validation, cfg.candidate_n, prep.data.inputs, prep.content_matrix)
        state = init_trainer(scorer, disc, prep.data, sched, validate, stage_rng(cfg.seed, "adversarial"),
                             generator_candidates(cfg, fs))
        state.save(trainer_path, _meta(cfg, prep))
    validate = validation_metrics(fs, prep.validation, cfg.candidate_n, prep.data.inputs, prep.content_matrix)
    state = train_adversarial(state, prep.data, sched, validate, generator_candidates(cfg, fs),
                              checkpoint_path=trainer_path, checkpoint_meta=_meta(cfg, prep),
                              stop_after=stop_after)
    save_model(cfg, prep, fs, state)
    _write(out_path(cfg, CURVE_CSV), state.curve_csv(cfg.hash))
    return TrainOutcome(fs, state, mf_hist, pre_hist)


def save_model(cfg: RunConfig, prep: Prepared, fs: FactorStore, state: TrainerState) -> None:
    tensors = dict(fs.to_tensors())
    tensors.update(state.best_generator.to_tensors("G."))
    meta = _meta(cfg, prep, best_epoch=state.best_epoch, best_validation_ndcg_at_5=state.best_ndcg,
                 epochs_run=state.epoch, scorer=asdict(state.best_generator.cfg), config=cfg.dump(hashed_only=True))
    save_checkpoint(out_path(cfg, MODEL_CKPT), tensors, meta)


def _check_meta(meta: dict, cfg: RunConfig, prep: Prepared) -> None:
    U, M = prep.dataset.num_users, prep.dataset.num_movies
    if meta.get("num_users") != U or meta.get("num_movies") != M:
        raise CheckpointError(f"checkpoint was built for {meta.get('num_users')} users x "
                              f"{meta.get('num_movies')} movies; data has {U} x {M}")


def load_model(cfg: RunConfig, prep: Prepared, checkpoint=None) -> Tuple[FactorStore, MixtureScorer, dict]:
    path = Path(checkpoint) if checkpoint else out_path(cfg, MODEL_CKPT)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors, meta = load_checkpoint(path)
    _check_meta(meta, cfg, prep)
    scorer = MixtureScorer.from_tensors(ScorerConfig(**meta["scorer"]), tensors, "G.")
    if scorer.cfg.variant != cfg.mixture:
        raise ConfigError(f"checkpoint holds mixture {scorer.cfg.variant}, config asks for {cfg.mixture}")
    return FactorStore.from_tensors(tensors), scorer, meta


# --- evaluation ---------------------------------------------------------------------------

def _content_for(prep: Prepared, no_content: bool) -> Optional[np.ndarray]:
    if prep.content is None:
        return None
    return prep.content.without_content().matrix if no_content else prep.content.matrix


def run_evaluation(cfg: RunConfig, checkpoint=None, no_content: bool = False,
                   prep: Optional[Prepared] = None) -> Tuple[MetricReport, MetricReport]:
    """Test-set reports for the MF baseline and the trained mixture."""
    prep = prepare(cfg) if prep is None else prep
    fs, scorer, _ = load_model(cfg, prep, checkpoint)
    label = cfg.mixture + ("-no-content" if no_content else "")
    mf_rep = evaluate(fs, None, prep.test, cfg.candidate_n, "mf", config_hash=cfg.hash)
    mix_rep = evaluate(fs, scorer, prep.test, cfg.candidate_n, label, prep.data.inputs,
                       _content_for(prep, no_content), cfg.hash)
    suffix = "_no_content" if no_content else ""
    _write(out_path(cfg, f"metrics_test{suffix}.csv"), reports_to_csv([mf_rep, mix_rep]))
    _write(out_path(cfg, f"metrics_test{suffix}_per_user.csv"), mf_rep.to_csv(True) + mix_rep.to_csv(True))
    _write(out_path(cfg, f"metrics_test{suffix}.txt"),
           f"config_hash {cfg.hash}\n{mf_rep.to_table()}\n\n{mix_rep.to_table()}\n")
    return mf_rep, mix_rep


def recommend(cfg: RunConfig, raw_user: int, n: int, checkpoint=None,
              prep: Optional[Prepared] = None) -> List[Tuple[int, float]]:
    """Top-n movies the user has not rated in training, as (raw id, score)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    prep = prepare(cfg) if prep is None else prep
    ds = prep.dataset
    if not ds.has_user(raw_user) or raw_user not in set(prep.split.train.user_ids[prep.split.train.users].tolist()):
        known = np.unique(prep.split.train.user_ids[prep.split.train.users])
        nearest = known[np.argsort(np.abs(known - raw_user), kind="stable")[:5]]
        raise DataError(f"unknown user {raw_user}; nearest known ids: {', '.join(map(str, sorted(nearest)))}")
    fs, scorer, _ = load_model(cfg, prep, checkpoint)
    u = ds.user_index(raw_user)
    targets = EvalTargets(prep.test.t, np.array([u]), {u: frozenset()}, prep.test.exclude)
    ranked = full_ranking(scorer, targets, prep.data.inputs, prep.content_matrix)[0].movies[:n]
    if not ranked:
        return []
    s = scorer.score_matrix([u], prep.test.t, np.array(ranked), prep.data.inputs, prep.content_matrix)[0]
    return [(int(ds.movie_ids[m]), float(expit(v))) for m, v in zip(ranked, s)]


def run_candidate_sweep(cfg: RunConfig, checkpoint=None, sizes: Optional[List[int]] = None,
                        prep: Optional[Prepared] = None) -> List[Tuple[int, MetricReport, MetricReport]]:
    prep = prepare(cfg) if prep is None else prep
    fs, scorer, _ = load_model(cfg, prep, checkpoint)
    sizes = cfg.int_list("sweep_candidates") if sizes is None else sizes
    mix = candidate_sweep(fs, scorer, prep.test, sizes, cfg.mixture, prep.data.inputs, prep.content_matrix, cfg.hash)
    mf = [evaluate(fs, None, prep.test, n, "mf", config_hash=cfg.hash) for n in sizes]
    rows = list(zip(sizes, mf, mix))
    reports = [r for _, a, b in rows for r in (a, b)]
    keys = {"candidates": [n for n in sizes for _ in (0, 1)]}
    _write(out_path(cfg, "sweep_candidates.csv"), reports_to_csv(reports, keys))
    return rows


def run_session_sweep(cfg: RunConfig, periods: Optional[List[int]] = None
                      ) -> List[Tuple[int, MetricReport, MetricReport]]:
    """Retrain the whole pipeline once per session length."""
    periods = cfg.int_list("sweep_periods") if periods is None else periods
    if not periods:
        raise ConfigError("session sweep needs at least one period")
    if min(periods) < 1:
        raise ConfigError("session periods must be >= 1 day")
    rows = []
    for p in periods:
        sub = replace(cfg, session_days=p, out_dir=str(Path(cfg.out_dir) / f"session_{p}d"))
        prep = prepare(sub)
        train(sub, prep)
        mf_rep, mix_rep = run_evaluation(sub, prep=prep)
        rows.append((p, mf_rep, mix_rep))
    reports = [r for _, a, b in rows for r in (a, b)]
    keys = {"session_days": [p for p, _, _ in rows for _ in (0, 1)]}
    _write(out_path(cfg, "sweep_sessions.csv"), reports_to_csv(reports, keys))
    return rows
