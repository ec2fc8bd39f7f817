"""Bilevel episodic training and inheritance-based adaptation.

Meta-training: per task, plain inner descent on the support loss gives
adapted parameters; the outer optimizer (adaptive mode) consumes the sum of
first-order gradients of the validation losses at those adapted points. An
exact second-order mode (finite-difference Hessian-vector products, tiny
models only) exists for verification.

Meta-testing: the frozen meta-model scores the unlabeled query set once with
temperature-scaled soft labels; adaptation then descends on
(1-lambda) * support CRF loss + lambda * distillation loss. Gold query
labels are sealed off behind a guard for the entire adaptation.
"""

from __future__ import annotations

import base64
import json

from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .crf import emissions, nll_loss
from .encoder import INIT_SCALE, Vocabulary, encode, init_encoder_params
from .episodes import MetaTask, TimeSplit, sample_train_task
from .errors import CheckpointError, DataError, UsageError
from .tagging import NUM_TAGS, TAG_NAMES

CHECKPOINT_VERSION = 1

# rng stream tags (never reuse a tag across purposes)
S_INIT, S_TASK, S_DROP, S_PROBE, S_EVAL, S_FORGET, S_BATCH, S_ADAPT = range(1, 9)

# plain minibatch size for the non-meta baseline
SCRATCH_BATCH = 16


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    emb_dim: int = 64
    hidden_dim: int = 64
    external_reps: bool = False
    rep_dim: int = 128

    def __post_init__(self):
        if not self.external_reps and self.rep_dim != 2 * self.hidden_dim:
            raise UsageError("rep_dim must equal 2*hidden_dim for the trainable encoder")


@dataclass
class TrainConfig:
    """Run settings; defaults follow the desk-scale protocol (see README)."""

    alpha: float = 1e-2        # inner/adaptation learning rate
    beta: float = 5e-3         # outer learning rate
    k: int = 5                 # support shots
    meta_batch: int = 4        # tasks per outer step
    max_steps: int = 5000      # outer-step budget
    inner_steps: int = 1
    adapt_steps: int = 10      # meta-test adaptation descent steps
    lam: float = 0.2           # distillation weight
    temperature: float = 5.0
    eval_size: int = 15        # validation/query posts per episode
    episodes: int = 50         # test episodes per evaluation
    seed: int = 0
    dropout: float = 0.1
    dropout_in_adapt: bool = False
    second_order: bool = False
    weight_decay: float = 0.01
    emb_dim: int = 64
    hidden_dim: int = 64
    snapshot_every: int = 0    # 0 = auto (a tenth of max_steps)

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise UsageError("learning rates must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise UsageError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.temperature <= 0:
            raise UsageError("temperature must be positive")
        if min(self.k, self.meta_batch, self.inner_steps, self.eval_size) < 1:
            raise UsageError("k, meta_batch, inner_steps and eval_size must be >= 1")
        if self.max_steps < 0 or self.adapt_steps < 0 or self.episodes < 1:
            raise UsageError("step and episode counts must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("dropout must lie in [0, 1)")

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class Model:
    """Parameters plus everything needed to map a post to emission logits."""

    params: nc.ParamSet
    vocab: Vocabulary | None
    mcfg: ModelConfig
    reps: list | None = None  # precomputed (n_i, rep_dim) arrays by post.index

    def with_params(self, params: nc.ParamSet) -> "Model":
        return Model(params, self.vocab, self.mcfg, self.reps)


class GuardedPost:
    """Query view whose gold labels are sealed off during adaptation."""

    __slots__ = ("tokens", "period", "index")

    def __init__(self, post):
        self.tokens = post.tokens
        self.period = post.period
        self.index = post.index

    @property
    def tags(self):
        raise RuntimeError("gold query labels are off-limits during adaptation")


def init_model(vocab: Vocabulary | None, mcfg: ModelConfig, seed: int,
               reps: list | None = None) -> Model:
    rng = nc.rng_from(seed, S_INIT)
    if mcfg.external_reps:
        params = nc.ParamSet()
    else:
        if vocab is None or vocab.size != mcfg.vocab_size:
            raise UsageError("vocabulary size does not match the model config")
        params = init_encoder_params(mcfg.vocab_size, mcfg.emb_dim, mcfg.hidden_dim, rng)
    params["emit_w"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(mcfg.rep_dim, NUM_TAGS))
    params["emit_b"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=NUM_TAGS)
    params["trans"] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(NUM_TAGS, NUM_TAGS))
    return Model(params, vocab, mcfg, reps)


def post_emissions(model: Model, post, *, train: bool = False,
                   dropout: float = 0.0, rng=None) -> nc.Tensor:
    if model.mcfg.external_reps:
        if model.reps is None or not 0 <= post.index < len(model.reps):
            raise DataError(f"no precomputed representation for post {post.index}")
        reps = nc.Tensor(model.reps[post.index])
    else:
        ids = model.vocab.encode(post.tokens)
        reps = encode(ids, model.params, train=train, dropout_rate=dropout, rng=rng)
    return emissions(reps, model.params["emit_w"], model.params["emit_b"])


def task_loss(model: Model, posts, *, train: bool = False,
              dropout: float = 0.0, rng=None) -> nc.Tensor:
    """Mean CRF negative log-likelihood over a set of labeled posts."""
    if not posts:
        raise DataError("task loss needs at least one post")
    total = None
    for post in posts:
        if post.tags is None:
            raise DataError("task loss needs labeled posts")
        em = post_emissions(model, post, train=train, dropout=dropout, rng=rng)
        loss = nll_loss(em, model.params["trans"], post.tags)
        total = loss if total is None else nc.add(total, loss)
    return nc.scale(total, 1.0 / len(posts))


def _descend(params: nc.ParamSet, grads: nc.ParamSet, lr: float) -> nc.ParamSet:
    state = nc.OptimizerState("plain", lr)
    return nc.optimizer_step(state, params, grads)


def inner_adapt(model: Model, support, steps: int, alpha: float, *,
                dropout: float = 0.0, rng=None) -> nc.ParamSet:
    """Plain descent on the support loss; returns the adapted parameter set."""
    if alpha < 0:
        raise UsageError("alpha must be non-negative")
    params = model.params
    for _ in range(steps):
        tape = nc.Tape()
        with nc.recording(tape):
            loss = task_loss(model.with_params(params), support,
                             train=dropout > 0.0, dropout=dropout, rng=rng)
        grads = nc.backward(loss, tape, params)
        params = _descend(params, grads, alpha) if alpha > 0 else params.clone()
    return params


# --------------------------------------------------------------- outer loop

def _support_grad_flat(model: Model, params: nc.ParamSet, support) -> np.ndarray:
    work = model.with_params(params)
    tape = nc.Tape()
    with nc.recording(tape):
        loss = task_loss(work, support)
    return nc.backward(loss, tape, params).flatten()


def _exact_outer_grad(model: Model, task: MetaTask, cfg: TrainConfig) -> nc.ParamSet:
    """(I - alpha * H_S(theta)) g_V(theta') via central-difference HVPs.

    Deterministic passes only (no dropout); guarded to tiny models and a
    single inner step, which is all the verification suite needs.
    """
    n_params = model.params.flatten().size
    if n_params > 500:
        raise UsageError(f"exact second-order mode allows <= 500 params, got {n_params}")
    if cfg.inner_steps != 1:
        raise UsageError("exact second-order mode requires inner_steps=1")
    adapted = inner_adapt(model, task.support, 1, cfg.alpha)
    tape = nc.Tape()
    with nc.recording(tape):
        val = task_loss(model.with_params(adapted), task.eval_posts)
    g_v = nc.backward(val, tape, adapted).flatten()
    v_norm = float(np.linalg.norm(g_v))
    if v_norm == 0.0:
        return model.params.from_flat(g_v)
    eps = 1e-4 / v_norm
    theta = model.params.flatten()
    g_plus = _support_grad_flat(model, model.params.from_flat(theta + eps * g_v), task.support)
    g_minus = _support_grad_flat(model, model.params.from_flat(theta - eps * g_v), task.support)
    hvp = (g_plus - g_minus) / (2.0 * eps)
    return model.params.from_flat(g_v - cfg.alpha * hvp)


def meta_outer_step(model: Model, tasks, cfg: TrainConfig,
                    opt_state: nc.OptimizerState, rng=None) -> float:
    """One Eq.-4-style update: sum of per-task meta-gradients into the
    adaptive optimizer. Returns the summed validation loss (pre-update)."""
    if not tasks:
        raise DataError("outer step needs at least one task")
    total_grads = model.params.zeros_like()
    total_val = 0.0
    for task in tasks:
        if cfg.second_order:
            g = _exact_outer_grad(model, task, cfg)
            adapted = inner_adapt(model, task.support, cfg.inner_steps, cfg.alpha)
            total_val += task_loss(model.with_params(adapted), task.eval_posts).item()
        else:
            adapted = inner_adapt(model, task.support, cfg.inner_steps, cfg.alpha,
                                  dropout=cfg.dropout, rng=rng)
            tape = nc.Tape()
            with nc.recording(tape):
                val = task_loss(model.with_params(adapted), task.eval_posts,
                                train=cfg.dropout > 0.0, dropout=cfg.dropout, rng=rng)
            g = nc.backward(val, tape, adapted)
            total_val += val.item()
        for name, t in total_grads.items():
            total_grads[name] = nc.add(t, g[name])
    model.params = nc.optimizer_step(opt_state, model.params, total_grads)
    return total_val


def _probe_loss(model: Model, tasks, cfg: TrainConfig) -> float:
    """Post-adaptation validation loss on frozen probe tasks, dropout off."""
    total = 0.0
    for task in tasks:
        adapted = inner_adapt(model, task.support, cfg.inner_steps, cfg.alpha)
        total += task_loss(model.with_params(adapted), task.eval_posts).item()
    return total / len(tasks)


def _build_vocab(split: TimeSplit) -> Vocabulary:
    token_lists = [p.tokens for p in split.past_posts()] + [p.tokens for p in split.latest]
    return Vocabulary.build(token_lists)


def meta_train(split: TimeSplit, cfg: TrainConfig, *,
               vocab: Vocabulary | None = None, reps: list | None = None,
               rep_dim: int | None = None) -> "Checkpoint":
    """Full episodic training on past periods; returns a meta checkpoint.

    Pass `reps` (per-post arrays, indexed by post.index) and `rep_dim` to run
    on precomputed representations instead of the trainable encoder.
    """
    if reps is not None:
        mcfg = ModelConfig(vocab_size=0, external_reps=True,
                           rep_dim=rep_dim or reps[0].shape[1])
        model = init_model(None, mcfg, cfg.seed, reps=reps)
    else:
        vocab = vocab or _build_vocab(split)
        mcfg = ModelConfig(vocab_size=vocab.size, emb_dim=cfg.emb_dim,
                           hidden_dim=cfg.hidden_dim, rep_dim=2 * cfg.hidden_dim)
        model = init_model(vocab, mcfg, cfg.seed)
    opt = nc.OptimizerState("adaptive", cfg.beta, weight_decay=cfg.weight_decay)
    probe = [sample_train_task(split, cfg.k, nc.rng_from(cfg.seed, S_PROBE, i), cfg.eval_size)
             for i in range(cfg.meta_batch)]
    every = cfg.snapshot_every or max(1, cfg.max_steps // 10)
    log = []
    for step in range(cfg.max_steps):
        if step % every == 0:
            log.append([step, _probe_loss(model, probe, cfg)])
        tasks = [sample_train_task(split, cfg.k, nc.rng_from(cfg.seed, S_TASK, step, i),
                                   cfg.eval_size)
                 for i in range(cfg.meta_batch)]
        meta_outer_step(model, tasks, cfg, opt, rng=nc.rng_from(cfg.seed, S_DROP, step))
    log.append([cfg.max_steps, _probe_loss(model, probe, cfg)])
    return checkpoint_from_model(model, cfg, {
        "phase": "meta", "seed": cfg.seed, "step_count": cfg.max_steps, "train_log": log,
    })


def train_scratch_baseline(split: TimeSplit, cfg: TrainConfig, *,
                           vocab: Vocabulary | None = None) -> "Checkpoint":
    """Plain supervised training on pooled past posts (the 'no meta' arm)."""
    vocab = vocab or _build_vocab(split)
    mcfg = ModelConfig(vocab_size=vocab.size, emb_dim=cfg.emb_dim,
                       hidden_dim=cfg.hidden_dim, rep_dim=2 * cfg.hidden_dim)
    model = init_model(vocab, mcfg, cfg.seed)
    pooled = [p for p in split.past_posts() if p.tags is not None]
    if not pooled:
        raise DataError("no labeled past posts to train on")
    batch = min(len(pooled), SCRATCH_BATCH)
    opt = nc.OptimizerState("adaptive", cfg.beta, weight_decay=cfg.weight_decay)
    probe_rng = nc.rng_from(cfg.seed, S_PROBE)
    probe_idx = probe_rng.choice(len(pooled), size=min(len(pooled), batch), replace=False)
    probe = [pooled[i] for i in probe_idx]
    every = cfg.snapshot_every or max(1, cfg.max_steps // 10)
    log = []
    for step in range(cfg.max_steps):
        if step % every == 0:
            log.append([step, task_loss(model, probe).item()])
        rng = nc.rng_from(cfg.seed, S_BATCH, step)
        idx = rng.choice(len(pooled), size=batch, replace=False)
        tape = nc.Tape()
        with nc.recording(tape):
            loss = task_loss(model, [pooled[i] for i in idx],
                             train=cfg.dropout > 0.0, dropout=cfg.dropout,
                             rng=nc.rng_from(cfg.seed, S_DROP, step))
        grads = nc.backward(loss, tape, model.params)
        model.params = nc.optimizer_step(opt, model.params, grads)
    log.append([cfg.max_steps, task_loss(model, probe).item()])
    return checkpoint_from_model(model, cfg, {
        "phase": "scratch", "seed": cfg.seed, "step_count": cfg.max_steps, "train_log": log,
    })


# ------------------------------------------------------------- distillation

def soft_labels(model: Model, posts, temperature: float) -> list:
    """Frozen-teacher soft assignments: per post a (n, 5) row-stochastic array
    softmax(logits / temperature). Computed once, outside any tape."""
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    out = []
    for post in posts:
        em = post_emissions(model, post)
        z = em.data / temperature
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        out.append(p)
    return out


def ki_loss(grid: list, model: Model, posts, temperature: float) -> nc.Tensor:
    """t^2 * sum over posts, tokens and classes of P_M * log(P_M / P_I).

    `grid` holds the teacher rows; the student distribution P_I comes from
    the current emission logits at the same temperature. Differentiable with
    respect to the student only.
    """
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    if len(grid) != len(posts):
        raise DataError(f"soft-label grid covers {len(grid)} posts, task has {len(posts)}")
    total = None
    for pm, post in zip(grid, posts):
        if pm.shape != (len(post.tokens), NUM_TAGS):
            raise DataError(f"soft-label grid misaligned for post {post.index}")
        em = post_emissions(model, post)
        scaled = nc.scale(em, 1.0 / temperature)
        logz = nc.logsumexp(scaled, axis=1)  # (n,)
        logp = nc.sub(scaled, nc.reshape(logz, (pm.shape[0], 1)))
        ref = float(np.sum(pm * np.log(pm)))
        if not np.isfinite(ref):
            raise nc.NumericError("teacher soft labels contain zero-probability entries")
        term = nc.sub(nc.Tensor(ref), nc.tsum(nc.mul(nc.Tensor(pm), logp)))
        total = term if total is None else nc.add(total, term)
    return nc.scale(total, temperature * temperature)


def total_loss(crf_term: nc.Tensor, ki_term: nc.Tensor, lam: float) -> nc.Tensor:
    """(1 - lambda) * CRF loss + lambda * distillation loss."""
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"lambda must lie in [0, 1], got {lam}")
    return nc.add(nc.scale(crf_term, 1.0 - lam), nc.scale(ki_term, lam))


# --------------------------------------------------------------- adaptation

def _adapt_rng(cfg: TrainConfig):
    return nc.rng_from(cfg.seed, S_ADAPT) if cfg.dropout_in_adapt else None


def fine_tune(ckpt: "Checkpoint", support, cfg: TrainConfig,
              on_step=None) -> "Checkpoint":
    """Plain adaptation on the support loss alone (the 'w/o I' path)."""
    student = model_from_checkpoint(ckpt)
    rng = _adapt_rng(cfg)
    for step in range(cfg.adapt_steps):
        tape = nc.Tape()
        with nc.recording(tape):
            loss = task_loss(student, support, train=cfg.dropout_in_adapt,
                             dropout=cfg.dropout if cfg.dropout_in_adapt else 0.0, rng=rng)
        grads = nc.backward(loss, tape, student.params)
        student.params = _descend(student.params, grads, cfg.alpha)
        if on_step is not None:
            on_step(step, student.params)
    return checkpoint_from_model(student, cfg, {
        "phase": "finetune", "seed": cfg.seed, "step_count": cfg.adapt_steps,
    })


def adapt_with_inheritance(meta_ckpt: "Checkpoint", task: MetaTask, cfg: TrainConfig,
                           on_step=None) -> "Checkpoint":
    """Eq.-8-style descent on the blended objective; returns the inheritor.

    The teacher (the meta checkpoint) is never modified; its soft labels over
    the unlabeled query posts are computed once up front. With lam == 0 the
    distillation term is skipped entirely and the trajectory matches
    `fine_tune` bit for bit.
    """
    if task.kind != "test":
        raise UsageError("adaptation expects a test task from the latest period")
    student = model_from_checkpoint(meta_ckpt)
    teacher = model_from_checkpoint(meta_ckpt)
    guarded = [GuardedPost(p) for p in task.eval_posts]
    grid = soft_labels(teacher, guarded, cfg.temperature) if cfg.lam > 0 else None
    rng = _adapt_rng(cfg)
    for step in range(cfg.adapt_steps):
        tape = nc.Tape()
        with nc.recording(tape):
            crf_term = task_loss(student, task.support, train=cfg.dropout_in_adapt,
                                 dropout=cfg.dropout if cfg.dropout_in_adapt else 0.0,
                                 rng=rng)
            if cfg.lam == 0.0:
                loss = crf_term
            else:
                loss = total_loss(crf_term, ki_loss(grid, student, guarded, cfg.temperature),
                                  cfg.lam)
        grads = nc.backward(loss, tape, student.params)
        student.params = _descend(student.params, grads, cfg.alpha)
        if on_step is not None:
            on_step(step, student.params)
    return checkpoint_from_model(student, cfg, {
        "phase": "inheritor", "seed": cfg.seed, "step_count": cfg.adapt_steps,
        "lambda": cfg.lam, "temperature": cfg.temperature,
    })


# -------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: nc.ParamSet
    vocab_tokens: list
    model_cfg: ModelConfig
    train_cfg_echo: dict
    tag_map: dict
    provenance: dict = field(default_factory=dict)


def checkpoint_from_model(model: Model, cfg: TrainConfig, provenance: dict) -> Checkpoint:
    return Checkpoint(
        params=model.params.clone(),
        vocab_tokens=model.vocab.id_order() if model.vocab is not None else [],
        model_cfg=model.mcfg,
        train_cfg_echo=cfg.echo(),
        tag_map={name: i for i, name in enumerate(TAG_NAMES)},
        provenance=provenance,
    )


def model_from_checkpoint(ckpt: Checkpoint, reps: list | None = None) -> Model:
    """Fresh Model with cloned tensors; the checkpoint stays untouched."""
    vocab = None
    if not ckpt.model_cfg.external_reps:
        vocab = Vocabulary.from_id_order(ckpt.vocab_tokens)
    return Model(ckpt.params.clone(), vocab, ckpt.model_cfg, reps)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Single JSON document; tensors as little-endian float64, base64-coded."""
    tensors = {}
    for name, t in ckpt.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        tensors[name] = {"shape": list(t.data.shape),
                         "data": base64.b64encode(raw).decode("ascii")}
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model": asdict(ckpt.model_cfg),
        "vocab": ckpt.vocab_tokens,
        "tag_map": ckpt.tag_map,
        "config": ckpt.train_cfg_echo,
        "provenance": ckpt.provenance,
        "tensors": tensors,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, ensure_ascii=False))
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable checkpoint: {e.msg}") from None
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version!r} not supported "
            f"(this build reads version {CHECKPOINT_VERSION})")
    expected_tags = {name: i for i, name in enumerate(TAG_NAMES)}
    if doc.get("tag_map") != expected_tags:
        raise CheckpointError("checkpoint tag mapping does not match this build")
    params = nc.ParamSet()
    for name, spec in doc["tensors"].items():
        raw = base64.b64decode(spec["data"])
        arr = np.frombuffer(raw, dtype="<f8").reshape(spec["shape"]).astype(np.float64)
        params[name] = arr.copy()
    return Checkpoint(
        params=params,
        vocab_tokens=list(doc.get("vocab", [])),
        model_cfg=ModelConfig(**doc["model"]),
        train_cfg_echo=dict(doc.get("config", {})),
        tag_map=dict(doc["tag_map"]),
        provenance=dict(doc.get("provenance", {})),
    )
