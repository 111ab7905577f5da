"""Experiment orchestration: train, pretrain, finetune, eval and sweep."""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .agents import A2C, ActorCritic, DoubleDQN, OffPolicyRunner, QNetwork, evaluate
from .baselines import ICM, RND
from .config import RunConfig
from .encoder import RandomEncoder, ReplayBuffer
from .entropy import BetaSchedule, IntrinsicConfig, IntrinsicVariant, RunningStd
from .flops import FlopLedger
from .gridworld import GridWorld, VecEnv, parse_task
from .intrinsic import RE3, NoIntrinsic
from .metrics import MetricsRow, MetricsWriter
from .nn import ConfigurationError, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
CONFIG_FILE = "config.txt"


def intrinsic_config(cfg: RunConfig) -> IntrinsicConfig:
    s = cfg.intrinsic
    return IntrinsicConfig(variant=IntrinsicVariant(s.variant), k=s.k, normalize=s.normalize,
                           exclude_self=s.exclude_self, avg_from=s.avg_from)


def build_provider(cfg: RunConfig, ledger: FlopLedger | None):
    s = cfg.intrinsic
    seed, gain = cfg.encoder_seed_value, cfg.init_gain
    if s.provider == "re3":
        return RE3(intrinsic_config(cfg), s.capacity, seed, ledger, s.encoder_head, init_gain=gain)
    if s.provider == "rnd":
        return RND(seed, s.hidden, s.lr, s.normalize, ledger, init_gain=gain)
    if s.provider == "icm":
        return ICM(seed, s.hidden, s.lr, normalize=s.normalize, ledger=ledger, init_gain=gain)
    return NoIntrinsic()


def _fixed_digests(provider) -> dict:
    """Hashes of parameters that must never change during a run."""
    if isinstance(provider, RE3):
        return {"random_encoder": provider.encoder.digest()}
    if isinstance(provider, RND):
        return {"rnd_target": provider.target.digest()}
    return {}


@dataclass
class RunResult:
    out_dir: str
    rows: list = field(default_factory=list)
    checkpoint: str = ""
    encoder_digests: list = field(default_factory=list)
    ledger: FlopLedger | None = None
    learner: object = None

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.out_dir, METRICS_FILE)

    def final_return(self) -> float:
        return self.rows[-1].eval_return_mean if self.rows else float("nan")

    def best_return(self) -> float:
        return max((r.eval_return_mean for r in self.rows), default=float("nan"))


class _IntrinsicStats:
    def __init__(self):
        self.vals: list[np.ndarray] = []

    def add(self, r):
        self.vals.append(np.asarray(r, dtype=np.float64).reshape(-1))

    def pop(self) -> tuple[float, float]:
        if not self.vals:
            return 0.0, 0.0
        x = np.concatenate(self.vals)
        self.vals = []
        return float(x.mean()), float(x.std())


def _eval_seed(cfg: RunConfig, idx: int) -> int:
    return cfg.env_seed_value * 1_000_003 + idx


def train(cfg: RunConfig, out_dir: str | None = None, init=None, phase: str = "train",
          progress=None) -> RunResult:
    """Run one experiment and write ``metrics.csv`` plus a final checkpoint.

    ``phase='pretrain'`` trains reward-free on ``cfg.pretrain.task`` for
    ``cfg.pretrain.steps`` steps. ``init`` is a loaded checkpoint whose policy
    networks and intrinsic-reward state seed this run.
    """
    cfg = copy.deepcopy(cfg).validate()
    if phase == "pretrain":
        cfg.task = cfg.pretrain.task
        cfg.total_steps = cfg.pretrain.steps
        cfg.step_unit = "summed"
        cfg.intrinsic.beta0 = cfg.pretrain.beta0
    elif phase != "train":
        raise ValueError(f"unknown phase {phase!r}")
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, CONFIG_FILE), "w") as fh:
        fh.write(cfgmod.serialize(cfg))

    if cfg.algo == "dqn":
        return _train_dqn(cfg, out_dir, init, phase, progress)

    task = cfg.task_enum
    ledger = FlopLedger()
    env = VecEnv(task, cfg.a2c.n_workers, cfg.env_seed_value, cfg.max_steps)
    model = ActorCritic(cfg.net_seed_value, ledger=ledger, init_gain=cfg.init_gain, input_mode=cfg.policy_input)
    provider = build_provider(cfg, ledger)
    if init is not None:
        model.load_networks(init.networks)
        provider.load_state_dict(init.state.get("provider", {}))
    beta = BetaSchedule(cfg.resolved_beta0(), cfg.intrinsic.rho)
    learner = A2C(env, model, cfg.a2c, provider, beta, seed=cfg.env_seed_value,
                  use_extrinsic=(phase != "pretrain"))

    digests0 = _fixed_digests(provider)
    result = RunResult(out_dir, ledger=ledger, learner=learner)
    writer = MetricsWriter(result.metrics_path)
    stats = _IntrinsicStats()
    budget, every = cfg.step_budget(), cfg.resolved_eval_every()
    next_eval = every
    t0 = time.perf_counter()
    eval_idx = 0

    def eval_point():
        nonlocal eval_idx
        rets = evaluate(model, task, cfg.eval.episodes, _eval_seed(cfg, eval_idx), cfg.eval.greedy, cfg.max_steps)
        eval_idx += 1
        _check_fixed(provider, digests0, result)
        mu, sd = stats.pop()
        row = MetricsRow(learner.env_steps, float(rets.mean()), float(rets.std()), mu, sd,
                         beta.value(learner.env_steps), ledger.total,
                         0.0 if cfg.deterministic else round(time.perf_counter() - t0, 3))
        writer.append(row)
        result.rows.append(row)
        if progress:
            progress(row)

    while learner.env_steps < budget:
        batch, _ = learner.train_iteration()
        stats.add(batch.r_i)
        if learner.env_steps >= next_eval:
            eval_point()
            while next_eval <= learner.env_steps:
                next_eval += every
    if learner.env_steps > 0 and (not result.rows or result.rows[-1].env_step != learner.env_steps):
        eval_point()

    state = {
        "phase": phase,
        "config": cfgmod.serialize(cfg),
        "env_steps": learner.env_steps,
        "updates": learner.updates,
        "encoder_seed": cfg.encoder_seed_value,
        "provider": provider.state_dict(),
        "beta": beta.state_dict(),
        "ledger": ledger.state_dict(),
        "fixed_digests": _fixed_digests(provider),
    }
    nets = dict(model.networks())
    nets.update(provider.networks())
    result.checkpoint = os.path.join(out_dir, cfg.checkpoint.name)
    save_checkpoint(result.checkpoint, nets, state)
    return result


def _check_fixed(provider, digests0: dict, result: RunResult):
    now = _fixed_digests(provider)
    result.encoder_digests.append(now)
    if now != digests0:
        raise RuntimeError(f"frozen parameters changed during training: {digests0} -> {now}")


def _train_dqn(cfg: RunConfig, out_dir: str, init, phase: str, progress) -> RunResult:
    task = cfg.task_enum
    ledger = FlopLedger()
    env = GridWorld(task, cfg.max_steps)
    agent = DoubleDQN(cfg.dqn, cfg.net_seed_value, ledger, init_gain=cfg.init_gain, input_mode=cfg.policy_input)
    if init is not None:
        if "q_network" not in init.networks:
            raise ConfigurationError("checkpoint has no 'q_network' network")
        agent.q.net.copy_from(init.networks["q_network"])
        agent.target.net.copy_from(init.networks["q_network"])
    encoder = RandomEncoder(cfg.encoder_seed_value, cfg.intrinsic.encoder_head, ledger,
                            init_gain=cfg.init_gain)
    ledger.register(encoder.role, encoder.macs)
    buffer = ReplayBuffer(cfg.dqn.buffer_capacity, encoder.latent_dim)
    use_re3 = cfg.intrinsic.provider == "re3"
    sched = BetaSchedule(cfg.resolved_beta0() if use_re3 else 0.0, cfg.intrinsic.rho)
    runner = OffPolicyRunner(env, agent, encoder if use_re3 else None, buffer, sched, intrinsic_config(cfg),
                             seed=cfg.env_seed_value, use_extrinsic=(phase != "pretrain"))
    digest0 = encoder.digest()
    result = RunResult(out_dir, ledger=ledger, learner=runner)
    writer = MetricsWriter(result.metrics_path)
    budget, every = cfg.step_budget(), cfg.resolved_eval_every()
    t0 = time.perf_counter()
    eval_idx = 0
    while runner.t < budget:
        n = min(every - runner.t % every, budget - runner.t)
        runner.run(n)
        rets = evaluate(agent.q, task, cfg.eval.episodes, _eval_seed(cfg, eval_idx), True, cfg.max_steps)
        eval_idx += 1
        result.encoder_digests.append({"random_encoder": encoder.digest()})
        if encoder.digest() != digest0:
            raise RuntimeError("random encoder changed during training")
        r_i = runner.log.last_intrinsic
        row = MetricsRow(runner.t, float(rets.mean()), float(rets.std()),
                         float(r_i.mean()) if r_i is not None else 0.0,
                         float(r_i.std()) if r_i is not None else 0.0,
                         sched.value(runner.t), ledger.total,
                         0.0 if cfg.deterministic else round(time.perf_counter() - t0, 3))
        writer.append(row)
        result.rows.append(row)
        if progress:
            progress(row)
    state = {"phase": phase, "config": cfgmod.serialize(cfg), "env_steps": runner.t,
             "updates": agent.updates, "encoder_seed": encoder.seed,
             "beta": sched.state_dict(), "ledger": ledger.state_dict(),
             "fixed_digests": {"random_encoder": encoder.digest()}}
    result.checkpoint = os.path.join(out_dir, cfg.checkpoint.name)
    save_checkpoint(result.checkpoint, {"q_network": agent.q.net}, state)
    return result


def pretrain(cfg: RunConfig, out_dir: str | None = None, progress=None) -> RunResult:
    """Reward-free exploration on ``cfg.pretrain.task``; the reward is ``beta * r_i`` only."""
    if cfg.intrinsic.provider == "none":
        raise ConfigurationError("intrinsic.provider: pretraining needs an intrinsic reward")
    return train(cfg, out_dir, phase="pretrain", progress=progress)


def finetune(cfg: RunConfig, checkpoint_path: str, out_dir: str | None = None, progress=None) -> RunResult:
    """Train on ``cfg.task`` starting from a pretrained checkpoint.

    Policy parameters and the intrinsic-reward normalizer are loaded; the RE3
    encoder seed is taken from the checkpoint unless set explicitly. With
    ``intrinsic.beta0 = auto`` the fine-tuning column of the beta table applies.
    """
    ckpt = load_checkpoint(checkpoint_path)
    cfg = copy.deepcopy(cfg)
    cfg.intrinsic.pretrained = True
    if cfg.intrinsic.encoder_seed is None and "encoder_seed" in ckpt.state:
        cfg.intrinsic.encoder_seed = int(ckpt.state["encoder_seed"])
    return train(cfg, out_dir, init=ckpt, progress=progress)


def evaluate_checkpoint(path: str, episodes: int = 100, task=None, seed: int = 0, greedy: bool = True,
                        max_steps: int | None = None) -> np.ndarray:
    ckpt = load_checkpoint(path)
    saved = cfgmod.parse(ckpt.state.get("config", ""))
    task = parse_task(task or saved.task)
    if "q_network" in ckpt.networks:
        model = QNetwork(input_mode=saved.policy_input)
        model.net.copy_from(ckpt.networks["q_network"])
    else:
        model = ActorCritic(0, input_mode=saved.policy_input)
        model.load_networks(ckpt.networks)
    return evaluate(model, task, episodes, seed, greedy, max_steps if max_steps is not None else saved.max_steps)


# ---- sweep ---------------------------------------------------------------


def _sweep_job(args):
    text, out_dir = args
    cfg = cfgmod.parse(text)
    res = train(cfg, out_dir)
    return out_dir, [r.eval_return_mean for r in res.rows]


def sweep(cfg: RunConfig, betas, seeds, out_root: str, processes: int = 1) -> list[dict]:
    """Train every (beta, seed) pair in its own process and rank the betas.

    Each beta is scored by the mean over seeds of its final evaluation
    return, ties broken by the mean area under the evaluation curve.
    """
    jobs = []
    for b in betas:
        for s in seeds:
            c = copy.deepcopy(cfg)
            c.intrinsic.beta0 = float(b)
            c.seed = int(s)
            jobs.append((cfgmod.serialize(c), os.path.join(out_root, f"beta_{b:g}", f"seed_{s}")))
    if processes > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(processes) as ex:
            done = dict(ex.map(_sweep_job, jobs))
    else:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        done = {}
        for job in jobs:
            with ctx.Pool(1) as pool:
                out, curve = pool.apply(_sweep_job, (job,))
            done[out] = curve
    table = []
    for b in betas:
        curves = [done[os.path.join(out_root, f"beta_{b:g}", f"seed_{s}")] for s in seeds]
        finals = [c[-1] if c else float("nan") for c in curves]
        aucs = [float(np.mean(c)) if c else float("nan") for c in curves]
        table.append({"beta": float(b), "final_mean": float(np.mean(finals)),
                      "final_std": float(np.std(finals)), "auc_mean": float(np.mean(aucs)), "best": False})
    best = max(table, key=lambda r: (r["final_mean"], r["auc_mean"]))
    best["best"] = True
    os.makedirs(out_root, exist_ok=True)
    with open(os.path.join(out_root, "summary.csv"), "w") as fh:
        fh.write("beta,final_mean,final_std,auc_mean,best\n")
        for r in table:
            fh.write(f"{r['beta']!r},{r['final_mean']!r},{r['final_std']!r},{r['auc_mean']!r},"
                     f"{str(r['best']).lower()}\n")
    with open(os.path.join(out_root, "summary.json"), "w") as fh:
        json.dump(table, fh, indent=1)
    return table


# ---- exploration coverage ------------------------------------------------


def pose_coverage(model: ActorCritic, task="Empty16", steps: int = 10_000, seed: int = 0) -> int:
    """Distinct ``(x, y, heading)`` poses visited by a sampling policy in ``steps`` steps."""
    from .agents.policy import sample_actions

    env = GridWorld(parse_task(task))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0F]))
    obs = env.reset(seed=int(rng.integers(2**31)))
    seen = {(*env.agent_pos, env.agent_dir)}
    ledger, model.ledger = model.ledger, None
    try:
        for _ in range(steps):
            a = sample_actions(model.probs(obs[None]), rng)[0]
            res = env.step(int(a))
            obs = env.reset() if res.done else res.observation
            seen.add((*env.agent_pos, env.agent_dir))
    finally:
        model.ledger = ledger
    return len(seen)


def running_std_of(path: str) -> RunningStd:
    ckpt = load_checkpoint(path)
    return RunningStd.from_state(ckpt.state["provider"]["running_std"])
