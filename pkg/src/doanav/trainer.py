"""Advantage actor-critic training and held-out evaluation."""
from __future__ import annotations

import csv
import logging
import math
import threading
import time
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tensor
from .metrics import EmptyInputError, EpisodeRecord, summarize
from .sim import (DONE, NUM_ACTIONS, NavEnv, Observation, World, WorldConfig, generate_world, reachable_classes,
                  shortest_path_length)

log = logging.getLogger(__name__)

SYNC_MODES = ("synchronous", "asynchronous")
CURVE_COLUMNS = ("episodes", "train_sr_ma", "val_sr", "val_spl", "val_sae", "loss", "wall_s")


@dataclass
class TrainConfig:
    workers: int = 4
    total_episodes: int = 20_000
    max_env_steps: int | None = None  # optional budget cap; training stops at whichever limit comes first
    rollout_len: int = 20
    gamma: float = 0.99
    beta_entropy: float = 0.01
    value_coef: float = 0.5
    lr: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 40.0
    seed: int = 0
    sync_mode: str = "synchronous"
    train_world_seeds: list = field(default_factory=lambda: list(range(64)))
    val_world_seeds: list = field(default_factory=lambda: list(range(10_000, 10_008)))
    val_episodes: int = 32
    val_every: int = 500  # episodes between validation rows
    sr_window: int = 100
    targets: list | None = None  # restrict sampled target classes
    greedy_eval: bool = False

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.rollout_len < 1:
            raise ValueError("rollout_len must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.total_episodes < 0:
            raise ValueError("total_episodes must be >= 0")
        if self.max_env_steps is not None and self.max_env_steps < 0:
            raise ValueError("max_env_steps must be >= 0")
        if self.sync_mode not in SYNC_MODES:
            raise ValueError(f"sync_mode must be one of {SYNC_MODES}")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be positive")
        if not self.train_world_seeds:
            raise ValueError("train_world_seeds must be nonempty")
        if self.val_every < 1 or self.sr_window < 1 or self.val_episodes < 0:
            raise ValueError("val_every and sr_window must be >= 1, val_episodes >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


def substream(root: int, name: str, *ids: int) -> np.random.Generator:
    """Independent generator keyed by (root seed, stream name, ids)."""
    return np.random.default_rng(np.random.SeedSequence([int(root), zlib.crc32(name.encode()), *map(int, ids)]))


# -- rollouts ---------------------------------------------------------------------
class Transition(NamedTuple):
    observation: Observation
    action: int
    reward: float
    value: Tensor  # 1 x 1, graph-attached
    log_prob: Tensor  # scalar, graph-attached
    entropy: Tensor  # scalar, graph-attached
    done: bool
    attention: np.ndarray


@dataclass
class Rollout:
    transitions: list
    bootstrap_value: float
    episode_done: bool = False
    success: bool = False

    def __len__(self) -> int:
        return len(self.transitions)


class Carry(NamedTuple):
    observation: Observation
    hidden: tuple
    prev_action: int


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    cum = np.cumsum(probs)
    return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(probs) - 1)


def collect_rollout(env: NavEnv, params: M.ModelParams, carry: Carry, rng: np.random.Generator, length: int,
                    dropout_rng: np.random.Generator | None = None, train: bool = True,
                    replay_actions=None) -> tuple:
    """Run up to ``length`` steps, keeping the graph for the loss.  Returns (Rollout, Carry)."""
    if env.done:
        raise RuntimeError("environment has no active episode")
    cfg = params.cfg
    static = M.static_parts(params)
    obs, hidden, pa = carry
    transitions = []
    outcome = None
    for t in range(length):
        out = M.forward(obs, env.target, pa, hidden, params, train=train, rng=dropout_rng, static=static)
        logits = out.logits
        if cfg.done_reminder:
            boost = M.done_reminder(np.zeros((1, NUM_ACTIONS)), out.target_conf, cfg.conf_threshold, cfg.done_boost)
            if boost.any():
                logits = ad.add(logits, Tensor(boost))
        lp = ad.log_softmax_rows(logits)
        probs = np.exp(lp.data[0])
        a = int(replay_actions[t]) if replay_actions is not None else _sample(probs, rng)
        entropy = ad.scale(ad.sum_all(ad.mul(ad.exp(lp), lp)), -1.0)
        outcome = env.step(a)
        transitions.append(Transition(obs, a, outcome.reward, out.value, ad.index(lp, (0, a)), entropy,
                                      outcome.done, out.attention.values))
        hidden, pa, obs = out.hidden, a, outcome.observation
        if outcome.done:
            break
    done = outcome.done
    if done:
        bootstrap = 0.0
        nxt = None
    else:
        bootstrap = float(M.forward(obs, env.target, pa, hidden, params, static=static).value.data[0, 0])
        nxt = Carry(obs, (Tensor(hidden[0].data), Tensor(hidden[1].data)), pa)
    return Rollout(transitions, bootstrap, done, bool(outcome.success)), nxt


def discounted_returns(rewards, gamma: float, bootstrap: float) -> np.ndarray:
    out = np.empty(len(rewards))
    running = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def a3c_loss(rollout: Rollout, gamma: float, value_coef: float = 0.5, beta_entropy: float = 0.01,
             advantages=None) -> Tensor:
    """Policy-gradient + value + entropy loss; advantages enter as constants."""
    if len(rollout) == 0:
        raise ValueError("empty rollout")
    tr = rollout.transitions
    returns = discounted_returns([t.reward for t in tr], gamma, rollout.bootstrap_value)
    if advantages is None:
        advantages = returns - np.array([t.value.data[0, 0] for t in tr])
    total = None
    for t, ret, adv in zip(tr, returns, advantages):
        err = ad.sub(Tensor(np.array([[ret]])), t.value)
        term = ad.add(ad.scale(t.log_prob, -float(adv)), ad.scale(ad.sum_all(ad.square(err)), value_coef))
        term = ad.sub(term, ad.scale(t.entropy, beta_entropy))
        total = term if total is None else ad.add(total, term)
    return total


# -- optimiser -----------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_update(params, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam step."""
    b1, b2 = betas
    for k, p in params.items():
        if grads[k].shape != p.data.shape:
            raise ValueError(f"gradient shape {grads[k].shape} does not match parameter {k} {p.data.shape}")
    state.t += 1
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        p.data -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = ad.global_norm(grads.values())
    if norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


# -- workers ----------------------------------------------------------------------------
def allowed_targets(world: World, targets=None) -> list:
    """Reachable classes of ``world``, optionally restricted to ``targets``."""
    found = reachable_classes(world)
    return found if targets is None else [c for c in found if c in targets]


def choose_target(world: World, rng: np.random.Generator, targets=None) -> int | None:
    present = allowed_targets(world, targets)
    if not present:
        return None
    return int(present[int(rng.integers(len(present)))])


class Worker:
    """Owns an episode stream over a world pool plus its own rng substreams."""

    def __init__(self, idx: int, worlds: list, root_seed: int, targets=None):
        self.idx = idx
        self.worlds = worlds
        self.targets = targets
        self.rng_world = substream(root_seed, "world", idx)
        self.rng_policy = substream(root_seed, "policy", idx)
        self.rng_dropout = substream(root_seed, "dropout", idx)
        self.envs: dict = {}
        self.env: NavEnv | None = None
        self.carry: Carry | None = None

    def start_episode(self, cfg: M.ModelConfig) -> None:
        for _ in range(100):
            i = int(self.rng_world.integers(len(self.worlds)))
            target = choose_target(self.worlds[i], self.rng_world, self.targets)
            if target is not None:
                break
        else:
            raise RuntimeError("no training world contains an allowed target class")
        env = self.envs.setdefault(i, NavEnv(self.worlds[i]))
        _, obs = env.reset(target, int(self.rng_world.integers(2**31)))
        self.env = env
        self.carry = Carry(obs, M.initial_hidden(cfg), M.START_ACTION)

    def rollout(self, params: M.ModelParams, length: int) -> Rollout:
        if self.carry is None:
            self.start_episode(params.cfg)
        ro, self.carry = collect_rollout(self.env, params, self.carry, self.rng_policy, length, self.rng_dropout)
        return ro


# -- evaluation -----------------------------------------------------------------------------
def run_episode(params: M.ModelParams, world: World, target: int, seed: int, rng: np.random.Generator,
                greedy: bool = False, feature_log: dict | None = None) -> EpisodeRecord:
    cfg = params.cfg
    env = NavEnv(world)
    state, obs = env.reset(target, seed)
    optimal = shortest_path_length(world, state, target)  # excludes the closing Done
    hidden, pa = M.initial_hidden(cfg), M.START_ACTION
    static = M.static_parts(params)
    actions, attention = [], []
    success = False
    while not env.done:
        if feature_log is not None:
            for q in np.nonzero(obs.conf > 0)[0]:
                feature_log.setdefault(int(q), []).append(obs.detections[q, :cfg.d_vis].copy())
        out = M.forward(obs, target, pa, hidden, params, static=static)
        logits = M.action_logits(out, cfg)
        if greedy:
            a = int(np.argmax(logits))
        else:
            p = np.exp(logits - logits.max())
            a = _sample(p / p.sum(), rng)
        attention.append(out.attention.values)
        step = env.step(a)
        actions.append(a)
        hidden, pa, obs, success = out.hidden, a, step.observation, step.success
    return EpisodeRecord(bool(success), len(actions), float(optimal), actions, int(target), attention,
                         int(world.seed), int(seed))


def evaluate(params: M.ModelParams, worlds: list, n_episodes: int, seed: int, greedy: bool = False,
             targets=None, feature_log: dict | None = None) -> list:
    """Fixed episode list over ``worlds`` (round robin), targets and starts drawn from ``seed``."""
    if n_episodes <= 0:
        raise EmptyInputError("evaluation needs at least one episode")
    usable = [w for w in worlds if allowed_targets(w, targets)]
    if not usable:
        raise RuntimeError("no evaluation world holds an allowed target class")
    rng = substream(seed, "eval")
    policy_rng = substream(seed, "eval-policy")
    records = []
    for i in range(n_episodes):
        world = usable[i % len(usable)]
        target = choose_target(world, rng, targets)
        records.append(run_episode(params, world, target, int(rng.integers(2**31)), policy_rng, greedy, feature_log))
    return records


def build_worlds(seeds, world_cfg: WorldConfig) -> list:
    return [generate_world(int(s), world_cfg) for s in seeds]


# -- training loop ----------------------------------------------------------------------------
@dataclass
class TrainResult:
    params: M.ModelParams
    best_params: M.ModelParams
    curve: list
    episodes: int
    env_steps: int
    best_val_sr: float


def write_curve(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in CURVE_COLUMNS})


class _Progress:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.episodes = 0
        self.steps = 0
        self.window = deque(maxlen=cfg.sr_window)
        self.losses: list = []
        self.next_val = cfg.val_every

    def record(self, ro: Rollout, loss: float) -> None:
        self.steps += len(ro)
        self.losses.append(loss)
        if ro.episode_done:
            self.episodes += 1
            self.window.append(1.0 if ro.success else 0.0)

    def finished(self) -> bool:
        cap = self.cfg.max_env_steps
        return self.episodes >= self.cfg.total_episodes or (cap is not None and self.steps >= cap)


class Trainer:
    def __init__(self, cfg: TrainConfig, model_cfg: M.ModelConfig, world_cfg: WorldConfig, out_dir=None):
        cfg.validate()
        model_cfg.validate()
        world_cfg.validate()
        if model_cfg.n_classes != world_cfg.num_classes or model_cfg.s_dim != world_cfg.s_dim \
                or model_cfg.m_cells != world_cfg.m_cells or model_cfg.d_img != world_cfg.d_img:
            raise ValueError("model config does not match the world's observation shapes")
        self.cfg, self.model_cfg, self.world_cfg = cfg, model_cfg, world_cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.train_worlds = build_worlds(cfg.train_world_seeds, world_cfg)
        self.val_worlds = build_worlds(cfg.val_world_seeds, world_cfg) if cfg.val_episodes else []
        self.params = M.ModelParams.init(model_cfg, substream(cfg.seed, "init"))
        self.best = self.params.copy()
        self.best_key = (-math.inf, -math.inf)
        self.adam = AdamState.zeros(self.params)
        self.curve: list = []
        self._lock = threading.Lock()

    # checkpoint / curve plumbing
    def _save(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.best.save(self.out_dir / "checkpoint.json")
        self.params.save(self.out_dir / "final_checkpoint.json")
        write_curve(self.curve, self.out_dir / "curve.csv")

    def _validate_row(self, prog: _Progress, t0: float) -> None:
        cfg = self.cfg
        if self.val_worlds:
            recs = evaluate(self.params, self.val_worlds, cfg.val_episodes, cfg.seed + 7919, cfg.greedy_eval,
                            cfg.targets)
            m = summarize(recs)
        else:
            m = {"sr": math.nan, "spl": math.nan, "sae": math.nan}
        key = (m["sr"], m["spl"]) if self.val_worlds else (0.0, 0.0)
        if key > self.best_key or not self.val_worlds:
            self.best_key = key
            self.best = self.params.copy()
        row = {
            "episodes": prog.episodes,
            "train_sr_ma": float(np.mean(prog.window)) if prog.window else 0.0,
            "val_sr": float(m["sr"]), "val_spl": float(m["spl"]), "val_sae": float(m["sae"]),
            "loss": float(np.mean(prog.losses)) if prog.losses else math.nan,
            "wall_s": time.perf_counter() - t0,
        }
        prog.losses = []
        self.curve.append(row)
        log.info("episodes=%d steps=%d train_sr=%.3f val_sr=%.3f", prog.episodes, prog.steps,
                 row["train_sr_ma"], row["val_sr"])
        self._save()

    def _maybe_validate(self, prog: _Progress, t0: float) -> None:
        if prog.episodes >= prog.next_val:
            while prog.next_val <= prog.episodes:
                prog.next_val += self.cfg.val_every
            self._validate_row(prog, t0)

    def _apply(self, grads: dict) -> None:
        clip_grads(grads, self.cfg.grad_clip)
        adam_update(self.params, grads, self.adam, self.cfg.lr, self.cfg.adam_betas, self.cfg.adam_eps)

    def _loss(self, ro: Rollout) -> Tensor:
        return a3c_loss(ro, self.cfg.gamma, self.cfg.value_coef, self.cfg.beta_entropy)

    def run(self) -> TrainResult:
        cfg = self.cfg
        prog = _Progress(cfg)
        t0 = time.perf_counter()
        self._save()
        if cfg.total_episodes == 0 or (cfg.max_env_steps == 0):
            return TrainResult(self.params, self.best, self.curve, 0, 0, math.nan)
        self._validate_row(prog, t0)
        if cfg.sync_mode == "synchronous":
            self._run_sync(prog, t0)
        else:
            self._run_async(prog, t0)
        if not self.curve or self.curve[-1]["episodes"] != prog.episodes:
            self._validate_row(prog, t0)
        return TrainResult(self.params, self.best, self.curve, prog.episodes, prog.steps, self.best_key[0])

    def _run_sync(self, prog: _Progress, t0: float) -> None:
        workers = [Worker(i, self.train_worlds, self.cfg.seed, self.cfg.targets) for i in range(self.cfg.workers)]
        k = len(workers)
        while not prog.finished():
            self.params.zero_grad()
            for w in workers:
                ro = w.rollout(self.params, self.cfg.rollout_len)
                loss = self._loss(ro)
                loss.backward()
                prog.record(ro, loss.item())
            grads = {name: g / k for name, g in self.params.grads().items()}
            self._apply(grads)
            self._maybe_validate(prog, t0)

    def _run_async(self, prog: _Progress, t0: float) -> None:
        errors: list = []

        def loop(idx: int) -> None:
            worker = Worker(idx, self.train_worlds, self.cfg.seed, self.cfg.targets)
            replica = self.params.copy()
            try:
                while True:
                    with self._lock:
                        if prog.finished():
                            return
                        replica.load_values(self.params)
                    replica.zero_grad()
                    ro = worker.rollout(replica, self.cfg.rollout_len)
                    loss = self._loss(ro)
                    loss.backward()
                    with self._lock:
                        self._apply(replica.grads())
                        prog.record(ro, loss.item())
                        self._maybe_validate(prog, t0)
            except Exception as exc:  # surfaced on the coordinating thread
                errors.append(exc)

        threads = [threading.Thread(target=loop, args=(i,), daemon=True) for i in range(self.cfg.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]


def train(cfg: TrainConfig, model_cfg: M.ModelConfig, world_cfg: WorldConfig, out_dir=None) -> TrainResult:
    """Train from scratch; writes checkpoint.json (best validation), final_checkpoint.json and curve.csv."""
    return Trainer(cfg, model_cfg, world_cfg, out_dir).run()
