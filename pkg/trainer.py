"""
Two-stage training (contrastive pretrain, ASR fine-tune), the joint and
SimCLR-style baselines, Adam, and the zero-/full-shot experiment matrix.
"""

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import numerics as nx
from augment import AugmentConfig, ViewBuilder, original_view
from contrast import LossValues, batch_asr_loss, contrastive_loss, embeddings_from_batch, mine_pairs, total_loss
from corpus import CorpusSplit, Utterance, corpus_frame_rms, derive_seed
from decode_eval import AccentScore, DecodeConfig, EvalReport, evaluate_split
from errors import (AccentCLError, CheckpointError, ConfigError, ContractError, DivergenceError,
                    NonFiniteError)
from model import (ModelConfig, ModelParams, forward_batch, init_params, load_checkpoint,
                   read_checkpoint_blobs, save_checkpoint)
from numerics import Tensor

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")
MODES = ("proposed", "joint", "simclr_pretrain")


# ======================================================
# Configuration
# ======================================================

@dataclass
class TrainConfig:
    stage: str = "pretrain"
    mode: str = "proposed"
    alpha: float = 1.0
    learning_rate: float = 2.83e-4
    batch_size: int = 16
    max_epochs: int = 10
    patience: int = 5
    eval_interval: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    tau: float = 0.07
    cap_per_class: int = 20
    log_interval: int = 10
    val_limit: int = 0
    max_steps: int = 0

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"train.stage must be one of {STAGES}, got '{self.stage}'", "stage")
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got '{self.mode}'", "mode")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ConfigError(f"learning rate must be a finite value > 0, got {self.learning_rate}", "learning_rate")
        if self.stage == "finetune" and self.alpha != 0:
            raise ConfigError("fine-tune stage requires alpha = 0", "alpha")
        if self.stage == "pretrain":
            expected = 0.0 if self.mode == "joint" else 1.0
            if self.alpha != expected:
                raise ConfigError(f"pretrain in mode {self.mode} requires alpha = {expected:g}", "alpha")
        for key in ("batch_size", "max_epochs", "patience", "eval_interval", "log_interval", "cap_per_class"):
            if getattr(self, key) < 1:
                raise ConfigError(f"train.{key} must be >= 1", key)
        if self.val_limit < 0 or self.max_steps < 0:
            raise ConfigError("train.val_limit and train.max_steps must be >= 0", "val_limit")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam hyperparameters need 0 <= beta < 1 and eps > 0", "beta1")
        if self.tau <= 0:
            raise ConfigError("train.tau must be > 0", "tau")

    @property
    def uses_contrastive(self) -> bool:
        return self.stage == "pretrain" and self.mode != "joint"

    @property
    def uses_asr(self) -> bool:
        return not (self.stage == "pretrain" and self.mode == "simclr_pretrain")


@dataclass
class TrainSettings:
    """The [train] section: shared knobs plus per-stage learning rates, epoch budgets and step caps (0 = none)"""
    pretrain_lr: float = 2.83e-4
    finetune_lr: float = 8e-5
    pretrain_max_epochs: int = 10
    finetune_max_epochs: int = 10
    fullshot_max_epochs: int = 5
    pretrain_max_steps: int = 300
    finetune_max_steps: int = 150
    fullshot_max_steps: int = 20
    batch_size: int = 16
    patience: int = 5
    eval_interval: int = 50
    tau: float = 0.07
    cap_per_class: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_interval: int = 10
    val_limit: int = 60
    seed: int = 0

    def stage_config(self, stage: str, mode: str = "proposed", full_shot: bool = False) -> TrainConfig:
        if stage == "pretrain":
            lr, epochs, steps = self.pretrain_lr, self.pretrain_max_epochs, self.pretrain_max_steps
            alpha = 0.0 if mode == "joint" else 1.0
        else:
            lr = self.finetune_lr
            epochs = self.fullshot_max_epochs if full_shot else self.finetune_max_epochs
            steps = self.fullshot_max_steps if full_shot else self.finetune_max_steps
            alpha = 0.0
        cfg = TrainConfig(stage=stage, mode=mode, alpha=alpha, learning_rate=lr, batch_size=self.batch_size,
                          max_epochs=epochs, patience=self.patience, eval_interval=self.eval_interval,
                          beta1=self.beta1, beta2=self.beta2, eps=self.eps, seed=self.seed, tau=self.tau,
                          cap_per_class=self.cap_per_class, log_interval=self.log_interval,
                          val_limit=self.val_limit, max_steps=steps)
        cfg.validate()
        return cfg


# ======================================================
# Optimizer and state
# ======================================================

class AdamOptimizer:
    """Adam with bias correction; moments keyed by weight name"""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def update(self, weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> Dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for name, w in weights.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(w)
            m = self.beta1 * self.m.get(name, np.zeros_like(w)) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(w)) + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            out[name] = w - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out

    def state_dict(self) -> Dict[str, Any]:
        return {"t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.t = int(state["t"])
        self.beta1, self.beta2, self.eps = float(state["beta1"]), float(state["beta2"]), float(state["eps"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


@dataclass(eq=False)
class TrainState:
    params: ModelParams
    optimizer: AdamOptimizer
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    best_metric: float = math.inf
    best_step: int = -1
    bad_evals: int = 0
    rejected_steps: int = 0

    def save(self, path: str) -> None:
        """Weights and Adam moments as checkpoint blobs, counters and RNG state in a JSON sidecar"""
        extra = {}
        for name, arr in self.optimizer.m.items():
            extra[f"adam_m/{name}"] = arr
        for name, arr in self.optimizer.v.items():
            extra[f"adam_v/{name}"] = arr
        save_checkpoint(self.params, path, extra)
        sidecar = {
            "step": self.step, "epoch": self.epoch, "best_metric": self.best_metric, "best_step": self.best_step,
            "bad_evals": self.bad_evals, "rejected_steps": self.rejected_steps,
            "adam": {"t": self.optimizer.t, "beta1": self.optimizer.beta1, "beta2": self.optimizer.beta2,
                     "eps": self.optimizer.eps},
            "rng": self.rng.bit_generator.state,
        }
        with open(path + ".json", "w") as f:
            json.dump(sidecar, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str, expected: Optional[ModelConfig] = None) -> "TrainState":
        params = load_checkpoint(path, expected)
        _, _, blobs = read_checkpoint_blobs(path)
        try:
            with open(path + ".json") as f:
                sidecar = json.load(f)
        except OSError as e:
            raise CheckpointError(f"missing training state sidecar for {path}: {e}") from e
        adam = sidecar["adam"]
        optimizer = AdamOptimizer(adam["beta1"], adam["beta2"], adam["eps"])
        optimizer.load_state_dict({
            **adam,
            "m": {k.split("/", 1)[1]: v for k, v in blobs.items() if k.startswith("adam_m/")},
            "v": {k.split("/", 1)[1]: v for k, v in blobs.items() if k.startswith("adam_v/")},
        })
        rng = np.random.default_rng()
        rng.bit_generator.state = sidecar["rng"]
        return cls(params, optimizer, rng, sidecar["step"], sidecar["epoch"], float(sidecar["best_metric"]),
                   sidecar["best_step"], sidecar["bad_evals"], sidecar["rejected_steps"])


def _all_finite(grads: Dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def optimizer_step(state: TrainState, grads: Dict[str, np.ndarray], lr: float) -> TrainState:
    """One Adam update of state.params; non-finite gradients leave the state untouched"""
    if not _all_finite(grads):
        state.rejected_steps += 1
        bad = sorted(name for name, g in grads.items() if not np.all(np.isfinite(g)))
        logger.warning(f"Rejected optimizer step {state.step}: non-finite gradients in {', '.join(bad)}")
        return state
    new_weights = state.optimizer.update(state.params.weights, grads, lr)
    state.params = ModelParams(state.params.config, new_weights, state.params.meta)
    return state


def new_state(params: ModelParams, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(derive_seed(cfg.seed, "train", cfg.stage, cfg.mode))
    return TrainState(params.copy(), AdamOptimizer(cfg.beta1, cfg.beta2, cfg.eps), rng)


# ======================================================
# Training
# ======================================================

def _validation_subset(utterances: Sequence[Utterance], limit: int) -> List[Utterance]:
    if not limit or limit >= len(utterances):
        return list(utterances)
    idx = np.unique(np.linspace(0, len(utterances) - 1, limit).round().astype(int))
    return [utterances[i] for i in idx]


def validation_metric(params: ModelParams, utterances: Sequence[Utterance], cfg: TrainConfig) -> float:
    """Pretrain: mean ASR loss (contrastive loss for simclr_pretrain). Fine-tune: greedy macro WER."""
    if cfg.stage == "finetune":
        report = evaluate_split(utterances, params, DecodeConfig(method="greedy"))
        return report.macro_wer
    out = forward_batch([u.frames for u in utterances], [u.target for u in utterances], params.bind(False))
    if cfg.mode == "simclr_pretrain":
        embeddings = embeddings_from_batch(out, [u.utt_id for u in utterances], ["original"] * len(utterances))
        batch = mine_pairs(embeddings, cfg.cap_per_class, np.random.default_rng(derive_seed(cfg.seed, "val-pairs")))
        return contrastive_loss(batch, cfg.tau).item()
    return batch_asr_loss(out).item()


def _resolve_init(init: Union[ModelParams, str], cfg: TrainConfig, model_cfg: Optional[ModelConfig]) -> ModelParams:
    params = load_checkpoint(init, model_cfg) if isinstance(init, str) else init
    if cfg.stage == "finetune" and params.meta.get("stage") not in STAGES:
        raise ContractError("fine-tune must start from a pretrain (or fine-tune) checkpoint")
    return params


def train_stage(corpus: CorpusSplit, augment_cfg: AugmentConfig, train_cfg: TrainConfig,
                init: Union[ModelParams, str], train_utterances: Optional[Sequence[Utterance]] = None,
                val_utterances: Optional[Sequence[Utterance]] = None,
                model_cfg: Optional[ModelConfig] = None) -> Tuple[ModelParams, pd.DataFrame]:
    """Run one training stage and return the best-validation params plus the step history"""
    train_cfg.validate()
    params = _resolve_init(init, train_cfg, model_cfg)
    train_utts = list(train_utterances if train_utterances is not None else corpus.utterances("train"))
    val_utts = _validation_subset(
        list(val_utterances if val_utterances is not None else corpus.utterances("validation")), train_cfg.val_limit)
    if not train_utts or not val_utts:
        raise ContractError("training needs non-empty train and validation utterance sets")

    builder = None
    if augment_cfg.enabled:
        builder = ViewBuilder(augment_cfg, corpus.voice, corpus.prototypes, corpus_frame_rms(train_utts),
                              corpus.config.noise_sigma, corpus.accents.keys())

    state = new_state(params, train_cfg)
    best_params = state.params.copy()
    history: List[Dict[str, float]] = []
    names = list(params.weights)
    logger.info(f"Starting {train_cfg.stage} ({train_cfg.mode}, alpha={train_cfg.alpha:g}, "
                f"lr={train_cfg.learning_rate:g}) on {len(train_utts)} utterances")

    stop = False
    for epoch in range(train_cfg.max_epochs):
        state.epoch = epoch
        order = state.rng.permutation(len(train_utts))
        for start in range(0, len(order), train_cfg.batch_size):
            batch = [train_utts[int(i)] for i in order[start:start + train_cfg.batch_size]]
            views = []
            for utt in batch:
                views.extend(builder.make_views(utt, state.rng) if builder else [original_view(utt)])

            weights = state.params.bind(True)
            try:
                out = forward_batch([v.frames for v in views], [v.target for v in views], weights)
                asr = batch_asr_loss(out)
                con, pairs = None, None
                if train_cfg.uses_contrastive:
                    embeddings = embeddings_from_batch(out, [v.source_utterance_id for v in views],
                                                       [v.view_tag for v in views])
                    pairs = mine_pairs(embeddings, train_cfg.cap_per_class, state.rng)
                    con = contrastive_loss(pairs, train_cfg.tau)
                if not train_cfg.uses_asr:
                    total = con
                else:
                    total = total_loss(asr, con if con is not None else Tensor(0.0), train_cfg.alpha)
                if not math.isfinite(total.item()):
                    raise NonFiniteError(f"loss is {total.item()}")
            except NonFiniteError as e:
                raise DivergenceError(f"training diverged at step {state.step}: {e}", state.step, history[-5:]) from e
            losses = LossValues(asr.item(), con.item() if con is not None else 0.0, total.item(), train_cfg.alpha,
                                len(pairs.positive_pairs) if pairs is not None else 0,
                                bool(pairs is not None and pairs.is_empty))

            grads = nx.backward(total, list(weights.values()))
            state = optimizer_step(state, {name: grads[weights[name]] for name in names}, train_cfg.learning_rate)
            state.step += 1

            record = {"step": state.step, "epoch": epoch, "asr": losses.asr}
            if con is not None:
                record.update(con=losses.con, pairs=losses.pair_count, no_positives=losses.no_positives)
            record["total"] = losses.total
            record["val_metric"] = math.nan

            if state.step % train_cfg.log_interval == 0:
                con_text = f" con {losses.con:.4f} ({losses.pair_count} pairs)" if con is not None else ""
                logger.info(f"step {state.step}: asr {losses.asr:.4f}{con_text} total {losses.total:.4f}")

            if state.step % train_cfg.eval_interval == 0:
                stop = _evaluate(state, record, val_utts, train_cfg)
                if state.bad_evals == 0:
                    best_params = state.params.copy()
            history.append(record)
            if stop or (train_cfg.max_steps and state.step >= train_cfg.max_steps):
                stop = True
                break
        if stop:
            break

    if not history or math.isnan(history[-1]["val_metric"]):
        record = history[-1] if history else {"step": state.step, "epoch": state.epoch, "val_metric": math.nan}
        _evaluate(state, record, val_utts, train_cfg)
        if state.bad_evals == 0:
            best_params = state.params.copy()

    best_params.meta = {**params.meta, "stage": train_cfg.stage, "mode": train_cfg.mode,
                        "alpha": train_cfg.alpha, "best_step": state.best_step,
                        "val_metric": state.best_metric, "seed": train_cfg.seed}
    logger.info(f"Finished {train_cfg.stage} after {state.step} steps; best validation metric "
                f"{state.best_metric:.4f} at step {state.best_step}")
    return best_params, history_frame(history, with_con=train_cfg.uses_contrastive)


def _evaluate(state: TrainState, record: Dict[str, float], val_utts: Sequence[Utterance], cfg: TrainConfig) -> bool:
    """Record the validation metric; True when patience is exhausted"""
    metric = validation_metric(state.params, val_utts, cfg)
    record["val_metric"] = metric
    if metric < state.best_metric:
        state.best_metric = metric
        state.best_step = state.step
        state.bad_evals = 0
    else:
        state.bad_evals += 1
    logger.info(f"eval at step {state.step}: val {metric:.4f} (best {state.best_metric:.4f}, "
                f"patience {state.bad_evals}/{cfg.patience})")
    if state.bad_evals >= cfg.patience:
        logger.info(f"Early stop at step {state.step}")
        return True
    return False


HISTORY_COLUMNS = ["step", "asr", "con", "total", "pairs", "no_positives", "val_metric", "epoch"]
CONTRASTIVE_COLUMNS = ("con", "pairs", "no_positives")


def history_frame(history: Sequence[Dict[str, float]], with_con: bool = True) -> pd.DataFrame:
    columns = [c for c in HISTORY_COLUMNS if with_con or c not in CONTRASTIVE_COLUMNS]
    return pd.DataFrame(list(history), columns=columns)


def write_history(history: pd.DataFrame, path: str) -> None:
    history.to_csv(path, index=False, float_format="%.8g")


# ======================================================
# Experiment matrix
# ======================================================

SHOTS = ("zero", "full")


@dataclass
class MatrixConfig:
    modes: List[str] = field(default_factory=lambda: ["joint", "proposed"])
    augmentations: List[str] = field(default_factory=lambda: ["none", "noise", "specaug", "altvoice", "all"])
    shots: List[str] = field(default_factory=lambda: ["zero", "full"])
    seeds: List[int] = field(default_factory=lambda: [0])
    holdout_per_accent: int = 100
    parallel: int = 1

    def validate(self) -> None:
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"matrix mode '{mode}' is not one of {MODES}", "modes")
        for aug in self.augmentations:
            AugmentConfig().for_augmentation(aug)
        for shot in self.shots:
            if shot not in SHOTS:
                raise ConfigError(f"matrix shot '{shot}' is not one of {SHOTS}", "shots")
        if not (self.modes and self.augmentations and self.shots and self.seeds):
            raise ConfigError("matrix lists must be non-empty", "modes")
        if self.holdout_per_accent < 1 or self.parallel < 1:
            raise ConfigError("matrix holdout_per_accent and parallel must be >= 1", "holdout_per_accent")


def split_holdout(utterances: Sequence[Utterance], n: int, seed: int,
                  accent_id: str = "") -> Tuple[List[Utterance], List[Utterance]]:
    """Seeded (fine-tune, holdout) split; the holdout is clamped so at least one utterance is left to fine-tune on"""
    if len(utterances) < 2:
        raise ContractError(f"accent {accent_id} needs at least 2 utterances for a holdout split")
    n_eff = min(n, len(utterances) - 1)
    if n_eff < n:
        logger.warning(f"Holdout for accent {accent_id} clamped to {n_eff} of {len(utterances)} utterances")
    order = np.random.default_rng(derive_seed(seed, "holdout", accent_id)).permutation(len(utterances))
    holdout = sorted(int(i) for i in order[:n_eff])
    held = set(holdout)
    return [u for i, u in enumerate(utterances) if i not in held], [utterances[i] for i in holdout]


@dataclass
class CellTask:
    corpus: CorpusSplit
    model_cfg: ModelConfig
    augment_cfg: AugmentConfig
    settings: TrainSettings
    decode_cfg: DecodeConfig
    mode: str
    augmentation: str
    seed: int
    shots: Tuple[str, ...]
    holdout_per_accent: int
    out_dir: Optional[str] = None

    @property
    def name(self) -> str:
        return f"{self.mode}-{self.augmentation}-s{self.seed}"


@dataclass
class CellResult:
    name: str
    reports: List[EvalReport] = field(default_factory=list)
    error: Optional[str] = None


def combine_reports(reports: Sequence[EvalReport], meta: Dict[str, str]) -> EvalReport:
    accents: Dict[str, AccentScore] = {}
    rows = []
    for report in reports:
        accents.update(report.accents)
        rows.extend(report.rows)
    return EvalReport(accents, meta, rows)


def run_cell(task: CellTask) -> CellResult:
    """Pretrain, fine-tune, then evaluate zero-shot and optionally full-shot for one matrix cell"""
    result = CellResult(task.name)
    try:
        settings = replace(task.settings, seed=task.seed)
        corpus = task.corpus
        augment = task.augment_cfg.for_augmentation(task.augmentation)
        params = init_params(task.model_cfg, derive_seed(task.seed, "init"))

        pretrained, hist_pre = train_stage(corpus, augment, settings.stage_config("pretrain", task.mode), params)
        finetuned, hist_ft = train_stage(corpus, AugmentConfig().for_augmentation("none"),
                                         settings.stage_config("finetune", task.mode), pretrained)

        splits = {a: split_holdout(utts, task.holdout_per_accent, task.seed, a)
                  for a, utts in corpus.test.items()}
        base_meta = {"mode": task.mode, "augmentation": task.augmentation, "seed": str(task.seed)}

        if "zero" in task.shots:
            holdouts = [u for _, held in splits.values() for u in held]
            report = evaluate_split(holdouts, finetuned, task.decode_cfg,
                                    {**base_meta, "shot": "zero", "checkpoint": finetuned.checkpoint_id})
            result.reports.append(report)

        if "full" in task.shots:
            per_accent = []
            full_cfg = settings.stage_config("finetune", task.mode, full_shot=True)
            for accent_id, (tune, held) in splits.items():
                adapted, _ = train_stage(corpus, AugmentConfig().for_augmentation("none"), full_cfg, finetuned,
                                         train_utterances=tune)
                per_accent.append(evaluate_split(held, adapted, task.decode_cfg))
            result.reports.append(combine_reports(per_accent, {**base_meta, "shot": "full", "checkpoint": ""}))

        if task.out_dir:
            os.makedirs(task.out_dir, exist_ok=True)
            save_checkpoint(finetuned, os.path.join(task.out_dir, f"{task.name}.ckpt"))
            write_history(hist_pre, os.path.join(task.out_dir, f"{task.name}_pretrain_history.csv"))
            write_history(hist_ft, os.path.join(task.out_dir, f"{task.name}_finetune_history.csv"))
        logger.info(f"Cell {task.name} finished: "
                    + ", ".join(f"{r.meta['shot']}-shot {r.macro_wer:.2f}%" for r in result.reports))
    except AccentCLError as e:
        result.error = f"{type(e).__name__}: {e}"
        result.reports = []
        logger.warning(f"Cell {task.name} failed: {result.error}")
    except Exception as e:
        result.error = f"{type(e).__name__}: {e}"
        result.reports = []
        logger.exception(f"Cell {task.name} crashed: {result.error}")
    return result


@dataclass
class MatrixResult:
    reports: List[EvalReport]
    failures: List[Dict[str, str]]


def run_experiment_matrix(corpus: CorpusSplit, matrix_cfg: MatrixConfig, model_cfg: ModelConfig,
                          augment_cfg: AugmentConfig, settings: TrainSettings, decode_cfg: DecodeConfig,
                          out_dir: Optional[str] = None,
                          cell_overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> MatrixResult:
    """Train and evaluate every (mode, augmentation, seed) cell; failed cells are recorded, not raised.

    cell_overrides maps a cell name such as "proposed-all-s0" to TrainSettings fields replaced for that cell only.
    """
    matrix_cfg.validate()
    tasks = []
    for seed in matrix_cfg.seeds:
        for mode in matrix_cfg.modes:
            for aug in matrix_cfg.augmentations:
                task = CellTask(corpus, model_cfg, augment_cfg, settings, decode_cfg, mode, aug, seed,
                                tuple(matrix_cfg.shots), matrix_cfg.holdout_per_accent, out_dir)
                overrides = (cell_overrides or {}).get(task.name)
                if overrides:
                    task.settings = replace(settings, **overrides)
                tasks.append(task)
    logger.info(f"Running {len(tasks)} matrix cells ({matrix_cfg.parallel} in parallel)")

    if matrix_cfg.parallel > 1:
        with ProcessPoolExecutor(max_workers=matrix_cfg.parallel) as pool:
            results = list(pool.map(run_cell, tasks))
    else:
        results = [run_cell(t) for t in tasks]

    reports = [r for res in results for r in res.reports]
    failures = [{"cell": res.name, "error": res.error} for res in results if res.error]
    if failures:
        logger.warning(f"{len(failures)} of {len(tasks)} matrix cells failed")
    return MatrixResult(reports, failures)